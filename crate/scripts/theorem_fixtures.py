#!/usr/bin/env python3
"""Regenerates crates/core/tests/fixtures/bound_rhs.json.

Each case holds raw training margins, a normalization factor and bound
parameters, plus the right-hand sides of both margin bounds evaluated with
50-digit arithmetic. Normalized margins are formed with IEEE double division
(as the library does); everything after that is exact or high precision.
"""

import json
import random
from fractions import Fraction
from pathlib import Path

from mpmath import mp, mpf, log, sqrt

mp.dps = 50

OUT = Path(__file__).resolve().parent.parent / "crates/core/tests/fixtures/bound_rhs.json"


def cdf(sorted_margins, gamma):
    return Fraction(sum(1 for m in sorted_margins if m <= gamma), len(sorted_margins))


def quantile(sorted_margins, q):
    # The level is compared with the CDF value as a double (count / n rounded
    # once), which keeps quantile and CDF an exact Galois pair in floating point.
    n = len(sorted_margins)
    for v in sorted_margins:
        if sum(1 for m in sorted_margins if m <= v) / n >= q:
            return v
    raise AssertionError("q above 1")


def margin_bound(sorted_margins, gamma1, gamma2, p):
    empirical = mpf(cdf(sorted_margins, gamma2).numerator) / cdf(sorted_margins, gamma2).denominator
    complexity = mpf(p["complexity"]) / (mpf(gamma2) - mpf(gamma1))
    confidence = sqrt(log(1 / mpf(p["delta"])) / (2 * mpf(p["n"])))
    return {
        "empirical": float(empirical),
        "complexity": float(complexity),
        "confidence": float(confidence),
        "total": float(empirical + complexity + confidence),
    }


def quantile_bound(sorted_margins, q, p):
    g = quantile(sorted_margins, q)
    if g <= 0:
        return {"error": "non-positive quantile margin"}
    n = mpf(p["n"])
    log2_arg = log(4 * (mpf(p["input_bound"]) + p["depth"]) / mpf(p["tau"]), 2)
    assert log2_arg >= 1
    confidence = sqrt(log(2 / mpf(p["delta"])) / (2 * n))
    stratification = sqrt(log(log2_arg) / n)
    c_q = mpf(q) + confidence + stratification
    complexity = mpf(p["complexity"]) / mpf(g)
    return {
        "quantile_margin": g,
        "confidence": float(confidence),
        "stratification": float(stratification),
        "c_q": float(c_q),
        "complexity": float(complexity),
        "total": float(c_q + complexity),
        "precondition_violated": g <= p["tau"],
    }


def case(rng, i):
    size = rng.randint(5, 60)
    shift = rng.uniform(-0.5, 2.0)
    raw = [rng.gauss(shift, 1.5) for _ in range(size)]
    if i % 3 == 0:
        raw = [round(v, 1) for v in raw]  # ties
    lipschitz = rng.uniform(0.5, 5.0)
    normalized = sorted(v / lipschitz for v in raw)
    q = rng.choice([rng.uniform(0.05, 1.0), 1.0, 0.5, Fraction(rng.randint(1, size), size)])
    q = float(q)
    gamma_hat = quantile(normalized, q)
    # Put tau below, at, or above the quantile margin so the flag is exercised both ways.
    mode = i % 4
    if gamma_hat > 0 and mode == 0:
        tau = gamma_hat
    elif gamma_hat > 0 and mode == 1:
        tau = gamma_hat * (1 + 1e-9)
    elif gamma_hat > 0 and mode == 2:
        tau = gamma_hat * (1 - 1e-9)
    else:
        tau = rng.uniform(1e-4, 0.5)
    params = {
        "num_classes": rng.randint(2, 100),
        "n": rng.choice([size, rng.randint(10, 10**6)]),
        "delta": rng.uniform(1e-4, 0.5),
        "complexity": rng.choice([0.0, rng.uniform(0.0, 5.0)]),
        "tau": tau,
        "input_bound": rng.uniform(0.5, 10.0),
        "depth": rng.randint(1, 20),
    }
    gamma1 = rng.uniform(0.0, 1.0)
    gamma2 = gamma1 + rng.uniform(0.01, 2.0)
    return {
        "lipschitz": lipschitz,
        "raw_margins": raw,
        "params": params,
        "gamma1": gamma1,
        "gamma2": gamma2,
        "q": q,
        "margin_bound": margin_bound(normalized, gamma1, gamma2, params),
        "quantile_bound": quantile_bound(normalized, q, params),
    }


def main():
    rng = random.Random(20240917)
    cases = [case(rng, i) for i in range(60)]
    OUT.write_text(json.dumps({"digits": mp.dps, "cases": cases}, indent=1) + "\n")
    flags = [c["quantile_bound"].get("precondition_violated") for c in cases]
    print(f"wrote {len(cases)} cases to {OUT}: {flags.count(True)} violated, "
          f"{flags.count(False)} satisfied, {flags.count(None)} undefined")


if __name__ == "__main__":
    main()
