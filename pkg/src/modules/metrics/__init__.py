#!/usr/bin/env python
# -*- coding: utf-8 -*-

from .metrics import (MetricEstimate, EvalReport, mae, roc_auc, recall_at_k,
                      bootstrap_ci)

__all__ = ['MetricEstimate', 'EvalReport', 'mae', 'roc_auc', 'recall_at_k',
           'bootstrap_ci']
