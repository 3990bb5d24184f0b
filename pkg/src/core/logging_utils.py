#!/usr/bin/env python
# -*- coding: utf-8 -*-

import logging
from typing import Optional

from rich.logging import RichHandler

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(name)s - %(message)s'


def setup_logging(verbose: bool = False, log_file: Optional[str] = None) -> None:
    """配置根日志记录器

    Args:
        verbose: 为 True 时输出 DEBUG 级别日志
        log_file: 可选的日志文件路径 (UTF-8)
    """
    level = logging.DEBUG if verbose else logging.INFO
    handlers = [RichHandler(show_path=False, rich_tracebacks=True)]
    if log_file:
        file_handler = logging.FileHandler(log_file, encoding='utf-8')
        file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
        handlers.append(file_handler)

    # RichHandler 自带时间和级别列
    logging.basicConfig(level=level, format='%(name)s - %(message)s',
                        handlers=handlers, force=True)
