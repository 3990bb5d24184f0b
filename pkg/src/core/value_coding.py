#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""数值的高斯群体编码, 合成图像特征与文本槽位特征共用"""

import numpy as np

VALUE_CENTERS = np.arange(-20.0, 131.0, 10.0)
VALUE_WIDTH = 10.0


def population_code(value: float, centers: np.ndarray = VALUE_CENTERS,
                    width: float = VALUE_WIDTH) -> np.ndarray:
    """返回单位范数的高斯响应向量, 每个中心一个分量"""
    response = np.exp(-0.5 * ((float(value) - centers) / width) ** 2)
    return response / np.linalg.norm(response)
