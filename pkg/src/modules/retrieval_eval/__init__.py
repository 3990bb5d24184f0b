#!/usr/bin/env python
# -*- coding: utf-8 -*-

from .retrieval_eval import (RetrievalPair, DedupResult, RetrievalResult, dedup_pairs,
                             rank_of_match, retrieval_metrics, mcmrr, retrieval_from_store,
                             to_eval_report, DIRECTIONS, IMAGE_MODES)

__all__ = ['RetrievalPair', 'DedupResult', 'RetrievalResult', 'dedup_pairs', 'rank_of_match',
           'retrieval_metrics', 'mcmrr', 'retrieval_from_store', 'to_eval_report',
           'DIRECTIONS', 'IMAGE_MODES']
