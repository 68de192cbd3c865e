"""McNemar paired comparison of two classifiers over the same samples."""

import math
from dataclasses import dataclass

from .errors import ComparisonError


@dataclass(frozen=True)
class McNemarResult:
    b: int          # A correct, B wrong
    c: int          # B correct, A wrong
    chi2: float
    p_value: float
    alpha: float
    significant: bool
    exact_p: float = None  # binomial variant, reported for small b+c


def discordant_counts(log_a, log_b):
    """Count samples A gets right and B wrong (b) and vice versa (c).

    Both logs must cover the identical sample_id set; pairing is by id.
    """
    by_id_a = {r.sample_id: r for r in log_a}
    by_id_b = {r.sample_id: r for r in log_b}
    if len(by_id_a) != len(log_a) or len(by_id_b) != len(log_b):
        raise ComparisonError("duplicate sample_ids in prediction log")
    only_a = set(by_id_a) - set(by_id_b)
    only_b = set(by_id_b) - set(by_id_a)
    if only_a or only_b:
        raise ComparisonError(
            f"prediction logs cover different samples "
            f"({len(only_a)} only in A, {len(only_b)} only in B)",
            only_in_a=only_a, only_in_b=only_b)
    b = c = 0
    for sid, ra in by_id_a.items():
        rb = by_id_b[sid]
        a_ok = ra.pred_label == ra.true_label
        b_ok = rb.pred_label == rb.true_label
        if a_ok and not b_ok:
            b += 1
        elif b_ok and not a_ok:
            c += 1
    return b, c


def chi2_sf_1dof(x):
    """Survival function of the 1-dof chi-square distribution: erfc(sqrt(x/2))."""
    if x < 0:
        raise ValueError("chi-square statistic must be >= 0")
    return math.erfc(math.sqrt(x / 2.0))


def _exact_binomial_p(b, c):
    """Two-sided exact binomial test of b successes in b+c trials at p=1/2."""
    n = b + c
    if n == 0:
        return 1.0
    k = min(b, c)
    tail = sum(math.comb(n, i) for i in range(k + 1)) / 2.0 ** n
    return min(1.0, 2.0 * tail)


def mcnemar(b, c, alpha=0.05, exact_threshold=25):
    """Continuity-corrected McNemar chi-square with 1 dof.

    chi2 = (max(|b-c|-1, 0))^2 / (b+c); b+c = 0 gives chi2 = 0, p = 1.
    For small discordant totals (< ``exact_threshold``) the exact binomial
    p-value is reported alongside, without replacing the chi-square form.
    """
    if b < 0 or c < 0:
        raise ValueError("discordant counts must be >= 0")
    n = b + c
    if n == 0:
        chi2, p = 0.0, 1.0
    else:
        chi2 = max(abs(b - c) - 1, 0) ** 2 / n
        p = chi2_sf_1dof(chi2)
    exact_p = _exact_binomial_p(b, c) if 0 < n < exact_threshold else None
    return McNemarResult(b=b, c=c, chi2=chi2, p_value=p, alpha=alpha,
                         significant=p < alpha, exact_p=exact_p)
