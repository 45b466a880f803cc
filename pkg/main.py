#!/usr/bin/env python
"""
spraygrid
Main entry point for running the CLI
"""
import os
import sys
from pathlib import Path

# 프로젝트 루트를 Python 경로에 추가
sys.path.insert(0, str(Path(__file__).parent))

# Python 바이트코드 캐싱 비활성화
os.environ['PYTHONDONTWRITEBYTECODE'] = '1'

from app.main import main


if __name__ == "__main__":
    sys.exit(main())
