"""Paired Student t-test with p-values from the regularized incomplete beta.

The incomplete beta is evaluated with the modified Lentz continued fraction,
so no statistics library or table is involved.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

TAILS = ("one_sided_less", "one_sided_greater", "two_sided")

_CF_EPS = 1e-16
_CF_TINY = 1e-300
_CF_MAXITER = 10_000


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for I_x(a, b) (modified Lentz)."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _CF_TINY:
        d = _CF_TINY
    d = 1.0 / d
    h = d
    for m in range(1, _CF_MAXITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = _CF_TINY if abs(d) < _CF_TINY else d
        c = 1.0 + aa / c
        c = _CF_TINY if abs(c) < _CF_TINY else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = _CF_TINY if abs(d) < _CF_TINY else d
        c = 1.0 + aa / c
        c = _CF_TINY if abs(c) < _CF_TINY else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_EPS:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc(a: float, b: float, x: float, y: Optional[float] = None) -> float:
    """Regularized incomplete beta I_x(a, b).

    ``y`` may pass ``1 - x`` when it is known more accurately than the
    subtraction would give.
    """
    if a <= 0 or b <= 0:
        raise ValueError(f"betainc needs a, b > 0, got a={a}, b={b}")
    if y is None:
        y = 1.0 - x
    if x <= 0.0:
        return 0.0
    if y <= 0.0:
        return 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log(y))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, y) / b


def t_sf(t: float, df: float) -> float:
    """Upper tail P(T > t) of Student's t with ``df`` degrees of freedom."""
    if df <= 0:
        raise ValueError(f"degrees of freedom must be positive, got {df}")
    if math.isinf(t):
        return 0.0 if t > 0 else 1.0
    if t == 0.0:
        return 0.5
    t2 = t * t
    tail = 0.5 * betainc(0.5 * df, 0.5, df / (df + t2), t2 / (df + t2))
    return tail if t > 0 else 1.0 - tail


def t_cdf(t: float, df: float) -> float:
    return t_sf(-t, df)


@dataclass(frozen=True)
class PairedSamples:
    a: tuple
    b: tuple

    def __post_init__(self):
        a = tuple(float(v) for v in self.a)
        b = tuple(float(v) for v in self.b)
        if len(a) != len(b):
            raise ValueError(f"paired samples need equal lengths, got {len(a)} and {len(b)}")
        if len(a) < 2:
            raise ValueError(f"paired t-test needs N >= 2, got N = {len(a)}")
        if not all(map(math.isfinite, a + b)):
            raise ValueError("paired samples must be finite")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def n(self) -> int:
        return len(self.a)


@dataclass(frozen=True)
class TTestResult:
    mean_a: float
    mean_b: float
    sd_a: float
    sd_b: float
    sem_a: float
    sem_b: float
    n: int
    mean_diff: float
    sd_diff: float
    t: float
    df: int
    p: float
    alpha: float
    mu0: float
    cohen_d: float
    tail: str
    reject: bool

    def to_dict(self) -> dict:
        return asdict(self)


def sem(sd: float, n: int) -> float:
    return sd / math.sqrt(n)


def t_statistic(mean_diff: float, sd_diff: float, n: int, mu0: float = 0.0) -> float:
    shift = mean_diff - mu0
    if sd_diff == 0.0:
        return 0.0 if shift == 0.0 else math.copysign(math.inf, shift)
    return shift / (sd_diff / math.sqrt(n))


def p_value(t: float, df: float, tail: str) -> float:
    if tail == "one_sided_less":
        return t_sf(t, df)
    if tail == "one_sided_greater":
        return t_cdf(t, df)
    if tail == "two_sided":
        return min(1.0, 2.0 * t_sf(abs(t), df))
    raise ValueError(f"unknown tail {tail!r}; expected one of {TAILS}")


def paired_t_test(samples: PairedSamples, alpha: float = 0.05,
                  tail: str = "one_sided_less", mu0: float = 0.0) -> TTestResult:
    """Paired t-test on the differences ``a - b``.

    ``one_sided_less`` tests H0: mean(b) >= mean(a) against the alternative
    that group ``b`` is smaller (the p-value is the upper tail of t).
    ``one_sided_greater`` is the mirror image; ``two_sided`` doubles the tail.
    """
    if tail not in TAILS:
        raise ValueError(f"unknown tail {tail!r}; expected one of {TAILS}")
    a = np.asarray(samples.a)
    b = np.asarray(samples.b)
    n = samples.n
    d = a - b
    mean_diff = float(d.mean())
    sd_diff = float(d.std(ddof=1))
    sd_a, sd_b = float(a.std(ddof=1)), float(b.std(ddof=1))
    t = t_statistic(mean_diff, sd_diff, n, mu0)
    df = n - 1
    p = p_value(t, df, tail)
    return TTestResult(
        mean_a=float(a.mean()), mean_b=float(b.mean()),
        sd_a=sd_a, sd_b=sd_b, sem_a=sem(sd_a, n), sem_b=sem(sd_b, n),
        n=n, mean_diff=mean_diff, sd_diff=sd_diff, t=t, df=df, p=p,
        alpha=alpha, mu0=mu0, cohen_d=t / math.sqrt(n), tail=tail,
        reject=bool(p < alpha),
    )


def paired_t_test_arrays(a: Sequence[float], b: Sequence[float], **kwargs) -> TTestResult:
    return paired_t_test(PairedSamples(tuple(a), tuple(b)), **kwargs)
