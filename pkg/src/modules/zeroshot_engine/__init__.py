#!/usr/bin/env python
# -*- coding: utf-8 -*-

from .zeroshot_engine import (Prompt, PromptGrid, ClassPromptSet, PromptSetFile,
                              build_prompt_grid, zeroshot_classify, zeroshot_regress_frame,
                              zeroshot_regress_video, classify_videos, regress_videos,
                              parse_prompt_set, load_prompt_set, builtin_tasks)

__all__ = ['Prompt', 'PromptGrid', 'ClassPromptSet', 'PromptSetFile', 'build_prompt_grid',
           'zeroshot_classify', 'zeroshot_regress_frame', 'zeroshot_regress_video',
           'classify_videos', 'regress_videos', 'parse_prompt_set', 'load_prompt_set',
           'builtin_tasks']
