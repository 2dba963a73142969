from .augment import AugmentConfig, augment, augment_trace
from .corpus import CorpusError, NameRecord, dedup, read_tsv, taxonomy_from_records, write_tsv
from .split import BalancedTest, SplitSpec, Splits, build_balanced_test, class_weights, stratified_split
from .synth import synth_corpus
from .text import NormalizationError, Vocab, detokenize, encode_batch, normalize, tokenize

__all__ = [
    "AugmentConfig",
    "BalancedTest",
    "CorpusError",
    "NameRecord",
    "NormalizationError",
    "SplitSpec",
    "Splits",
    "Vocab",
    "augment",
    "augment_trace",
    "build_balanced_test",
    "class_weights",
    "dedup",
    "detokenize",
    "encode_batch",
    "normalize",
    "read_tsv",
    "stratified_split",
    "synth_corpus",
    "taxonomy_from_records",
    "tokenize",
    "write_tsv",
]
