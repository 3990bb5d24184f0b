#!/usr/bin/env python
# -*- coding: utf-8 -*-

from .synth_corpus import (LatentState, SyntheticStudy, SynthConfig, generate_corpus,
                           render_report, split_by_patient, export_corpus, load_corpus,
                           latent_embedding, task_truth, CHAMBERS, DEVICES, SEVERITY_LEVELS,
                           LATENT_DIM)

__all__ = ['LatentState', 'SyntheticStudy', 'SynthConfig', 'generate_corpus',
           'render_report', 'split_by_patient', 'export_corpus', 'load_corpus',
           'latent_embedding', 'task_truth', 'CHAMBERS', 'DEVICES', 'SEVERITY_LEVELS',
           'LATENT_DIM']
