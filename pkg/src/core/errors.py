#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""统一的异常类型，每类错误对应一个命令行退出码"""


class CardioLensError(ValueError):
    """所有领域错误的基类"""

    exit_code = 1


class UsageError(CardioLensError):
    """参数或路径使用错误 (退出码 1)"""

    exit_code = 1


class InputFormatError(CardioLensError):
    """输入文件/数据格式错误 (退出码 2)"""

    exit_code = 2


class NumericError(CardioLensError):
    """数值计算失败 (退出码 3)"""

    exit_code = 3
