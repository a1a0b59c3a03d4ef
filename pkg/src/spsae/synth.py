"""Synthetic labor-survey lookalike data.

Generates a unit-level sample and matching population cross-tabulations
shaped like a national labor-force survey: areas of very different sizes, a
share of out-of-sample areas, two categorical covariates (sex by age group,
education), one numeric covariate (log registered-unemployment count per
sex-age cell), and a three-component discrete random-intercept distribution.
Useful for end-to-end demos and format smoke tests; the real survey data it
imitates is not distributable.
"""

from __future__ import annotations

import csv

import numpy as np
from scipy.special import expit

__all__ = ["generate_lookalike", "write_lookalike"]

SEX_AGE_LEVELS = ("F:15-24", "F:25-34", "F:35-65", "M:15-24", "M:25-34", "M:35-65")
EDUCATION_LEVELS = ("high_school", "middle_school", "primary_or_less", "university")

# Effects for the reference-coded design: sex_age levels 2.. then education
# levels 2.. (lexicographic references F:15-24 and high_school), then the
# log unemployment-count slope.
TRUE_BETA = {
    "sex_age=F:25-34": 0.34,
    "sex_age=F:35-65": -0.82,
    "sex_age=M:15-24": 0.22,
    "sex_age=M:25-34": 0.34,
    "sex_age=M:35-65": -0.57,
    "education=middle_school": -0.03,
    "education=primary_or_less": -0.26,
    "education=university": -0.27,
    "log_ucount": 0.11,
}
TRUE_XI = (-3.6, -2.6, -1.4)
TRUE_PI = (0.45, 0.35, 0.20)


def generate_lookalike(m_areas: int = 80, seed: int = 0, out_of_sample_share: float = 0.15):
    """Build sample rows and cross-tab rows as lists of dicts.

    Returns (sample_rows, crosstab_rows, truth) where truth records the
    generating parameters and each area's component.
    """
    rng = np.random.default_rng(seed)
    cells = [(sa, edu) for sa in SEX_AGE_LEVELS for edu in EDUCATION_LEVELS]
    beta = np.array(list(TRUE_BETA.values()))
    sample_rows, crosstab_rows = [], []
    components = []
    n_out = int(round(out_of_sample_share * m_areas))
    for i in range(m_areas):
        area_id = f"A{i + 1:04d}"
        g = rng.choice(len(TRUE_XI), p=TRUE_PI)
        components.append(int(g))
        N_i = int(rng.integers(2000, 20000))
        cell_probs = rng.dirichlet(np.full(len(cells), 2.0))
        pop_counts = rng.multinomial(N_i, cell_probs)
        log_u = {sa: float(rng.uniform(0.0, 4.0)) for sa in SEX_AGE_LEVELS}

        for (sa, edu), count in zip(cells, pop_counts):
            if count == 0:
                continue
            crosstab_rows.append(
                {
                    "area_id": area_id,
                    "sex_age": sa,
                    "education": edu,
                    "log_ucount": f"{log_u[sa]:.6f}",
                    "count": str(int(count)),
                }
            )

        if i < n_out:
            continue
        n_i = int(np.clip(round(N_i * rng.uniform(0.005, 0.02)), 10, None))
        sampled = rng.multivariate_hypergeometric(pop_counts, min(n_i, int(pop_counts.sum())))
        for (sa, edu), k in zip(cells, sampled):
            if k == 0:
                continue
            x = _encode(sa, edu, log_u[sa])
            prob = expit(TRUE_XI[g] + float(x @ beta))
            ys = rng.random(k) < prob
            for y in ys:
                sample_rows.append(
                    {
                        "area_id": area_id,
                        "y": str(int(y)),
                        "sex_age": sa,
                        "education": edu,
                        "log_ucount": f"{log_u[sa]:.6f}",
                    }
                )
    truth = {
        "beta": dict(TRUE_BETA),
        "xi": TRUE_XI,
        "pi": TRUE_PI,
        "components": components,
        "n_out_of_sample": n_out,
    }
    return sample_rows, crosstab_rows, truth


def _encode(sex_age: str, education: str, log_u: float) -> np.ndarray:
    x = np.zeros(len(TRUE_BETA))
    names = list(TRUE_BETA)
    if sex_age != SEX_AGE_LEVELS[0]:
        x[names.index(f"sex_age={sex_age}")] = 1.0
    if education != EDUCATION_LEVELS[0]:
        x[names.index(f"education={education}")] = 1.0
    x[names.index("log_ucount")] = log_u
    return x


def write_lookalike(sample_path, crosstab_path, m_areas: int = 80, seed: int = 0):
    """Write the lookalike sample and cross-tabulation CSV files."""
    sample_rows, crosstab_rows, truth = generate_lookalike(m_areas, seed)
    with open(sample_path, "w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=["area_id", "y", "sex_age", "education", "log_ucount"])
        writer.writeheader()
        writer.writerows(sample_rows)
    with open(crosstab_path, "w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=["area_id", "sex_age", "education", "log_ucount", "count"])
        writer.writeheader()
        writer.writerows(crosstab_rows)
    return truth
