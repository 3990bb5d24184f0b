#!/usr/bin/env python
# -*- coding: utf-8 -*-

from .template_tokenizer import (TemplateVocab, TemplateEntry, TokenSequence,
                                 TemplateTokenizer, ParsedSentence,
                                 normalize_text, split_sentences, load_vocab,
                                 load_vocab_file, load_starter_vocab,
                                 tokenize_template, detokenize, parse_sequence,
                                 pad_sequence, DEFAULT_CONTEXT_LENGTH)
from .bpe_tokenizer import (BpeVocab, BpeTokenizer, train_bpe, tokenize_bpe,
                            decode_bpe)
from .corpus_stats import corpus_stats, token_counts

__all__ = ['TemplateVocab', 'TemplateEntry', 'TokenSequence', 'TemplateTokenizer',
           'ParsedSentence', 'normalize_text', 'split_sentences', 'load_vocab',
           'load_vocab_file', 'load_starter_vocab', 'tokenize_template',
           'detokenize', 'parse_sequence', 'pad_sequence', 'DEFAULT_CONTEXT_LENGTH',
           'BpeVocab', 'BpeTokenizer', 'train_bpe', 'tokenize_bpe', 'decode_bpe',
           'corpus_stats', 'token_counts']
