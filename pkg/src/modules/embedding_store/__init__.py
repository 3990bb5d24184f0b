#!/usr/bin/env python
# -*- coding: utf-8 -*-

from .embedding_store import (EmbeddingRecord, EmbeddingStore, LoadReport,
                              normalize, cosine_similarity, mean_pool, top_k,
                              rank_candidates, read_blob, write_blob,
                              import_embeddings, export_embeddings,
                              load_store, save_store, HEADER_SIZE)

__all__ = ['EmbeddingRecord', 'EmbeddingStore', 'LoadReport', 'normalize',
           'cosine_similarity', 'mean_pool', 'top_k', 'rank_candidates',
           'read_blob', 'write_blob', 'import_embeddings', 'export_embeddings',
           'load_store', 'save_store', 'HEADER_SIZE']
