"""Unit Error Rate: Levenshtein alignment counts, per-condition pooling with
binomial error bars, and a generic token error rate for word-level scoring.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .audio import Condition
from .quantizer import UnitSequence, deduplicate


class MetricError(Exception):
    pass


@dataclass
class AlignmentCounts:
    substitutions: int
    insertions: int
    deletions: int
    ref_length: int

    @property
    def total_errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions


def edit_distance(hyp, ref) -> AlignmentCounts:
    """Levenshtein DP with unit costs.

    Ties between minimal alignments resolve in the order match/substitution,
    then deletion, then insertion, so lone substitutions are preferred over
    insert+delete pairs.
    """
    hyp = list(hyp)
    ref = list(ref)
    H, R = len(hyp), len(ref)
    # cell = (cost, subs, ins, dels)
    prev = [(j, 0, 0, j) for j in range(R + 1)]
    for i in range(1, H + 1):
        cur = [(i, 0, i, 0)] + [None] * R
        hi = hyp[i - 1]
        for j in range(1, R + 1):
            c_d, s_d, i_d, d_d = prev[j - 1]
            sub = 0 if hi == ref[j - 1] else 1
            best = (c_d + sub, s_d + sub, i_d, d_d)
            c_u, s_u, i_u, d_u = cur[j - 1]  # deletion: consume ref only
            if c_u + 1 < best[0]:
                best = (c_u + 1, s_u, i_u, d_u + 1)
            c_l, s_l, i_l, d_l = prev[j]  # insertion: extra hyp token
            if c_l + 1 < best[0]:
                best = (c_l + 1, s_l, i_l + 1, d_l)
            cur[j] = best
        prev = cur
    _, subs, ins, dels = prev[R]
    return AlignmentCounts(substitutions=subs, insertions=ins, deletions=dels,
                           ref_length=R)


def uer(hyp: UnitSequence, ref: UnitSequence) -> float:
    """Percent unit errors; both sequences are deduplicated before alignment."""
    hyp_units = hyp.units if hyp.deduplicated else deduplicate(hyp).units
    ref_units = ref.units if ref.deduplicated else deduplicate(ref).units
    if not ref_units:
        raise MetricError("reference is empty after deduplication")
    counts = edit_distance(hyp_units, ref_units)
    return 100.0 * counts.total_errors / counts.ref_length


def token_error_rate(hyp_tokens, ref_tokens) -> float:
    """Edit-distance error percentage over arbitrary tokens, no deduplication."""
    ref_tokens = list(ref_tokens)
    if not ref_tokens:
        raise MetricError("empty reference")
    counts = edit_distance(list(hyp_tokens), ref_tokens)
    return 100.0 * counts.total_errors / counts.ref_length


def binomial_std(p: float, n_units: int, conservative: bool = True) -> float:
    """Binomial std of an error rate, in percent.

    Conservative mode maximises the variance with p_eff = 0.5; exact mode uses
    the observed rate (clipped into [0, 1] since UER can exceed 100%).
    """
    if n_units < 1:
        raise MetricError("need at least one reference unit")
    p_eff = 0.5 if conservative else min(max(p, 0.0), 1.0)
    return 100.0 * float(np.sqrt(p_eff * (1.0 - p_eff) / n_units))


# ---------------------------------------------------------------------------
# per-condition aggregation
# ---------------------------------------------------------------------------

BUCKETS = ("clean", "noise_h", "noise_l", "reverb")
_NOISE_SPLIT_DB = 12.5  # {15,20} -> high, {5,10} -> low; midpoint for off-grid


def bucket_of(condition: Condition) -> str:
    if condition.kind == "clean":
        return "clean"
    if condition.kind == "reverb":
        return "reverb"
    return "noise_h" if condition.snr_db >= _NOISE_SPLIT_DB else "noise_l"


@dataclass
class BucketStats:
    errors: int = 0
    ref_units: int = 0
    utterances: int = 0

    @property
    def uer(self) -> float:
        if self.ref_units == 0:
            return float("nan")
        return 100.0 * self.errors / self.ref_units

    def std(self, conservative: bool = True) -> float:
        if self.ref_units == 0:
            return float("nan")
        return binomial_std(self.errors / self.ref_units, self.ref_units,
                            conservative=conservative)


@dataclass
class ConditionReport:
    buckets: dict[str, BucketStats]
    conservative: bool = True

    @property
    def overall_uer(self) -> float:
        errors = sum(b.errors for b in self.buckets.values())
        refs = sum(b.ref_units for b in self.buckets.values())
        return 100.0 * errors / refs if refs else float("nan")

    def render_table(self, title: str = "UER (%) per condition") -> str:
        header = f"{'':12s}" + "".join(f"{name:>12s}" for name in BUCKETS) + f"{'overall':>12s}"
        uer_row = f"{'UER':12s}"
        std_row = f"{'std':12s}"
        n_row = f"{'ref units':12s}"
        for name in BUCKETS:
            b = self.buckets.get(name, BucketStats())
            uer_row += f"{b.uer:12.2f}" if b.ref_units else f"{'-':>12s}"
            std_row += f"{b.std(self.conservative):12.3f}" if b.ref_units else f"{'-':>12s}"
            n_row += f"{b.ref_units:12d}"
        uer_row += f"{self.overall_uer:12.2f}"
        return "\n".join([title, header, uer_row, std_row, n_row])

    def to_records(self) -> list[str]:
        recs = []
        for name in BUCKETS:
            b = self.buckets.get(name, BucketStats())
            if b.ref_units == 0:
                continue
            recs.append(
                f"{name}\t{b.uer:.6f}\t{b.std(self.conservative):.6f}"
                f"\t{b.ref_units}\t{b.utterances}"
            )
        recs.append(f"overall\t{self.overall_uer:.6f}\t-\t"
                    f"{sum(b.ref_units for b in self.buckets.values())}\t"
                    f"{sum(b.utterances for b in self.buckets.values())}")
        return recs


def condition_report(pairs, conservative: bool = True) -> ConditionReport:
    """Pool error counts per condition bucket.

    pairs: iterable of (utt_id, Condition, hyp UnitSequence, ref UnitSequence).
    UER per bucket is corpus-level (summed errors over summed reference
    lengths), not a mean of per-utterance rates.
    """
    buckets = {name: BucketStats() for name in BUCKETS}
    for _utt_id, condition, hyp, ref in pairs:
        name = bucket_of(condition)
        hyp_units = hyp.units if hyp.deduplicated else deduplicate(hyp).units
        ref_units = ref.units if ref.deduplicated else deduplicate(ref).units
        if not ref_units:
            raise MetricError(f"empty reference for {_utt_id}")
        counts = edit_distance(hyp_units, ref_units)
        b = buckets[name]
        b.errors += counts.total_errors
        b.ref_units += counts.ref_length
        b.utterances += 1
    return ConditionReport(buckets=buckets, conservative=conservative)
