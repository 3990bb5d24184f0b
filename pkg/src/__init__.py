"""
CardioLens 超声心动图图文嵌入工具包
"""

__version__ = '0.1.0'
