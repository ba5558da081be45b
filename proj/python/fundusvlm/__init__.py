"""Synthetic fundus vision-language toolkit.

Thin python surface over the C++ core: tokenizer, corpus text rules,
statistics, learning-rate schedule, checkpoint inspection, greedy
generation, and the full command-line interface via run().
"""

from ._core import (
    BOS,
    EOS,
    PAD,
    SIGN_NAMES,
    VOCAB_SIZE,
    ContractError,
    CorruptionError,
    DimensionError,
    __version__,
    bootstrap_ci,
    build_description,
    checkpoint_info,
    clean_caption,
    compute_absolute_lr,
    decode_bytes,
    derive_signs,
    encode_bytes,
    generate_text,
    judge_accuracy,
    lr_at,
    normal_quantile,
    proportion_test,
    render_dialogue_prompt,
    run,
    select_instruction,
    t_test_two_sided,
    wilson_interval,
)

__all__ = [
    "BOS",
    "EOS",
    "PAD",
    "SIGN_NAMES",
    "VOCAB_SIZE",
    "ContractError",
    "CorruptionError",
    "DimensionError",
    "__version__",
    "bootstrap_ci",
    "build_description",
    "checkpoint_info",
    "clean_caption",
    "compute_absolute_lr",
    "decode_bytes",
    "derive_signs",
    "encode_bytes",
    "generate_text",
    "judge_accuracy",
    "lr_at",
    "normal_quantile",
    "proportion_test",
    "render_dialogue_prompt",
    "run",
    "select_instruction",
    "t_test_two_sided",
    "wilson_interval",
]
