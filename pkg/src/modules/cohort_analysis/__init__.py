#!/usr/bin/env python
# -*- coding: utf-8 -*-

from .cohort_analysis import (PairSample, TimelinePoint, ProcedureTimeline, RELATIONS,
                              relation_of, sample_pairs, relation_summary, same_patient_auc,
                              procedure_timeline, build_timelines, pre_post_auc,
                              timelines_to_frame, load_events)

__all__ = ['PairSample', 'TimelinePoint', 'ProcedureTimeline', 'RELATIONS', 'relation_of',
           'sample_pairs', 'relation_summary', 'same_patient_auc', 'procedure_timeline',
           'build_timelines', 'pre_post_auc', 'timelines_to_frame', 'load_events']
