"""
CLI subcommand modules
"""
