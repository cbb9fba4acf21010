"""Regenerate the bundled covariate pool fixture.

Two resident-level covariates: age in years and an activities-of-daily-living
score on 0..28. Marginals are a clipped normal (age) and a scaled beta (ADL),
joined through a Gaussian copula with a weak negative correlation.
"""

import csv
import sys
from pathlib import Path

import numpy as np
from scipy.stats import beta, norm

N_ROWS = 976
SEED = 20240601
COPULA_CORR = -0.05


def main(out_path):
    rng = np.random.default_rng(SEED)
    cov = [[1.0, COPULA_CORR], [COPULA_CORR, 1.0]]
    u = norm.cdf(rng.multivariate_normal([0.0, 0.0], cov, size=N_ROWS))
    age = np.clip(np.round(norm.ppf(u[:, 0], 80.5, 12.1)), 45, 104)
    adl = np.round(28 * beta.ppf(u[:, 1], 2.44, 1.58))
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["age", "adl"])
        for a, b in zip(age, adl):
            writer.writerow([int(a), int(b)])


if __name__ == "__main__":
    default = Path(__file__).resolve().parents[1] / "src" / "latentps" / "data" / "covariate_pool.csv"
    main(sys.argv[1] if len(sys.argv) > 1 else default)
