"""Reference-based evaluation of instruction-tuned LLM outputs.

SemScore (sentence-embedding cosine between a model response and the gold
target), ROUGE-L, BLEU, greedy-matching BERTScore and an LLM judge, plus the
ranking and correlation analysis used to compare metrics with human grades.
"""

from .analysis import (
    cohen_kappa,
    correlation_report,
    grade_to_score,
    kendall_tau_b,
    mean_score_per_model,
    pearson_r,
    per_group_correlation,
    rank_models,
)
from .corpus import (
    Dataset,
    Direction,
    EvalRecord,
    Grade,
    HumanRating,
    ModelResponse,
    ScoreMatrix,
    load_external_scores,
    load_ratings,
    load_records,
    load_responses,
    validate_join,
)
from .embedding import (
    HashEmbedder,
    bertscore_f1,
    cosine,
    embed_batch,
    pool,
    reference_embedder,
    semscore,
)
from .judge import build_prompt, filter_self_eval, parse_score
from .ngram import lcs_length, mean_metric, rouge_l, rouge_tokenize, sentence_bleu, tokenize_13a

__version__ = "0.1.0"
