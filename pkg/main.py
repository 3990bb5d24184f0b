#!/usr/bin/env python
# -*- coding: utf-8 -*-

# 本项目使用uv管理Python包
# 安装依赖: uv pip install -r requirements.txt
# 用法: python main.py --help

import sys

from src.cli import main

if __name__ == '__main__':
    sys.exit(main())
