#!/usr/bin/env python
# -*- coding: utf-8 -*-

from .features import BagFeaturizer, SlotFeaturizer, make_featurizer, FEATURIZERS
from .toy_dual_encoder import (DualEncoderParams, ClipGradients, TrainingPair, Checkpoint,
                               TrainResult, init_params, encode_image_toy, encode_text_toy,
                               clip_loss, loss_and_param_grads, gradient_check, lr_schedule,
                               epoch_draws, validation_mcmrr, train, build_training_pairs,
                               text_encoder, encode_frames, encode_corpus, LOG_TEMP_INIT)

__all__ = ['BagFeaturizer', 'SlotFeaturizer', 'make_featurizer', 'FEATURIZERS',
           'DualEncoderParams', 'ClipGradients', 'TrainingPair', 'Checkpoint', 'TrainResult',
           'init_params', 'encode_image_toy', 'encode_text_toy', 'clip_loss',
           'loss_and_param_grads', 'gradient_check', 'lr_schedule', 'epoch_draws',
           'validation_mcmrr', 'train', 'build_training_pairs', 'text_encoder', 'encode_frames',
           'encode_corpus', 'LOG_TEMP_INIT']
