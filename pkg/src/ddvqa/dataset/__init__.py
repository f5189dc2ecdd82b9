"""QA corpus construction, triplet mining and synthetic data."""

from .annotations import (DropEntry, FilterDecision, Majority, RawAnnotation,
                          aggregate_majority, augment_general_answer, build_records,
                          quality_filter, read_annotations, write_annotations)
from .mining import (ContrastiveTriplet, TripletIndex, answer_text, mine_image_triplet,
                     mine_text_triplet)
from .records import (ANSWER_RE, COMPONENTS, FINE_COMPONENTS, GENERAL_QUESTION, MANIPULATIONS,
                      QARecord, SyntheticImage, corpus_stats, make_questions, parse_answer,
                      question_for, read_image, read_records, render_answer, split_for,
                      write_image, write_records)
from .synthetic import (ARTIFACTS, SyntheticConfig, all_artifact_types, generate_raw,
                        generate_synthetic_corpus)

__all__ = [
    "ANSWER_RE", "ARTIFACTS", "COMPONENTS", "ContrastiveTriplet", "DropEntry",
    "FINE_COMPONENTS", "FilterDecision", "GENERAL_QUESTION", "MANIPULATIONS", "Majority",
    "QARecord", "RawAnnotation", "SyntheticConfig", "SyntheticImage", "TripletIndex",
    "aggregate_majority", "all_artifact_types", "answer_text", "augment_general_answer",
    "build_records", "corpus_stats", "generate_raw", "generate_synthetic_corpus",
    "make_questions", "mine_image_triplet", "mine_text_triplet", "parse_answer",
    "quality_filter", "question_for", "read_annotations", "read_image", "read_records",
    "render_answer", "split_for", "write_annotations", "write_image", "write_records",
]
