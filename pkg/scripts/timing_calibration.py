"""
Fit the encode-time coefficients of a ComputeProfile to observed end-to-end
timings (tokens, kappa, seconds).

The response length is collinear with the LLM fixed overhead in this model, so
output_tokens is held fixed and three coefficients are fitted by non-negative
least squares.
"""

import logging
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd
import yaml
from scipy.optimize import nnls

from jppo_errors import CalibrationError
from service_costs import ComputeProfile, PromptProfile, compressed_tokens, encode_times

logger = logging.getLogger(__name__)

TIMING_COLUMNS = ["tokens", "kappa", "seconds"]
MIN_ROWS = 4
REPORT_KAPPA = 0.25


@dataclass
class CalibrationResult:
    profile: ComputeProfile
    residuals: pd.DataFrame
    rmse: float
    improvements: dict
    mean_improvement: float
    pooled_improvement: float


def load_timings(path):
    """Read a timings CSV with exactly the columns tokens, kappa, seconds."""
    try:
        df = pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise CalibrationError(f"Cannot read timings file {path}: {e}") from e
    extra = set(df.columns) - set(TIMING_COLUMNS)
    missing = set(TIMING_COLUMNS) - set(df.columns)
    if extra or missing:
        raise CalibrationError(f"Timings file must have columns {', '.join(TIMING_COLUMNS)} "
                               f"(missing: {sorted(missing)}, unexpected: {sorted(extra)})")
    df = df[TIMING_COLUMNS].astype({"tokens": int, "kappa": float, "seconds": float})
    if (df["tokens"] < 1).any() or ((df["kappa"] <= 0) | (df["kappa"] > 1)).any() or (df["seconds"] < 0).any():
        raise CalibrationError("Timings need tokens >= 1, kappa in (0, 1] and non-negative seconds")
    return df


def _prompt(tokens):
    return PromptProfile(len_instruction=0, len_demos=int(tokens), len_question=0)


def design_matrix(df, output_tokens):
    """Columns: SLM tokens (0 when uncompressed), LLM tokens (compressed input + output), constant."""
    rows = []
    for tokens, kappa in zip(df["tokens"], df["kappa"]):
        prompt = _prompt(tokens)
        slm_tokens = 0.0 if kappa >= 1.0 else float(tokens)
        llm_tokens = float(compressed_tokens(prompt, kappa) + output_tokens)
        rows.append([slm_tokens, llm_tokens, 1.0])
    return np.array(rows), df["seconds"].to_numpy(dtype=float)


def modeled_time(profile, tokens, kappa):
    t_slm, t_llm = encode_times(_prompt(tokens), kappa, profile)
    return t_slm + t_llm


def improvement_at(profile, tokens, kappa=REPORT_KAPPA):
    """Relative encode-latency reduction of ratio kappa against no compression."""
    base = modeled_time(profile, tokens, 1.0)
    return 1.0 - modeled_time(profile, tokens, kappa) / base


def fit_compute_profile(df, output_tokens=60, base=None):
    """Least-squares fit of slm/llm per-token times and the LLM fixed overhead.

    Args:
        df: DataFrame from load_timings
        output_tokens: Response length held fixed during the fit
        base: ComputeProfile supplying the GPU fields (defaults used otherwise)

    Raises:
        CalibrationError: fewer than four rows, rank-deficient data or a zero coefficient
    """
    if len(df) < MIN_ROWS:
        raise CalibrationError(f"Need at least {MIN_ROWS} timing rows, got {len(df)}")
    a, b = design_matrix(df, output_tokens)
    rank = np.linalg.matrix_rank(a)
    if rank < a.shape[1]:
        raise CalibrationError(f"Timing rows determine only {rank} of {a.shape[1]} coefficients; "
                               "add rows with different lengths and ratios")
    coef, _ = nnls(a, b)
    slm, llm, overhead = (float(c) for c in coef)
    if slm <= 0 or llm <= 0:
        raise CalibrationError(f"Fit produced a non-positive per-token time (slm={slm}, llm={llm})")

    base = base or ComputeProfile()
    profile = replace(base, slm_time_per_token_s=slm, llm_time_per_token_s=llm,
                      llm_fixed_overhead_s=overhead, output_tokens=int(output_tokens))
    fitted = a @ coef
    residuals = df.assign(fitted=fitted, residual=b - fitted)
    rmse = float(np.sqrt(np.mean((b - fitted) ** 2)))

    lengths = sorted(set(int(t) for t in df["tokens"]))
    improvements = {n: improvement_at(profile, n) for n in lengths}
    base_total = sum(modeled_time(profile, n, 1.0) for n in lengths)
    compressed_total = sum(modeled_time(profile, n, REPORT_KAPPA) for n in lengths)
    logger.info("Calibrated slm=%.6f s/token llm=%.6f s/token overhead=%.4f s (rmse %.4f s)",
                slm, llm, overhead, rmse)
    return CalibrationResult(
        profile=profile,
        residuals=residuals,
        rmse=rmse,
        improvements=improvements,
        mean_improvement=float(np.mean(list(improvements.values()))),
        pooled_improvement=1.0 - compressed_total / base_total,
    )


def profile_fragment(profile):
    """Config fragment for the service.compute section."""
    return {"service": {"compute": {
        "slm_time_per_token_s": round(profile.slm_time_per_token_s, 6),
        "llm_time_per_token_s": round(profile.llm_time_per_token_s, 6),
        "llm_fixed_overhead_s": round(profile.llm_fixed_overhead_s, 4),
        "output_tokens": profile.output_tokens,
        "slm_gpu_count": profile.slm_gpu_count,
        "slm_gpu_power_w": profile.slm_gpu_power_w,
        "llm_gpu_count": profile.llm_gpu_count,
        "llm_gpu_power_w": profile.llm_gpu_power_w,
    }}}


def write_fragment(path, profile):
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(profile_fragment(profile), f, sort_keys=False)
    return path
