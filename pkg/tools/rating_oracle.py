"""Independent oracle for the pairwise rating update.

Computes posterior skill moments for the two-player Gaussian performance
model by direct numerical integration, with no reference to the analytic
update in ``gridquest.rating``.  Run it to regenerate the constants frozen
into ``tests/test_rating.py``:

    python3 tools/rating_oracle.py

Model: skills s_a ~ N(mu_a, sigma_a^2 + tau^2), s_b likewise (dynamics
noise folded in up front), performances p_i ~ N(s_i, beta^2).  "a wins"
means p_a - p_b > eps, a draw means |p_a - p_b| <= eps.  Marginalizing the
opponent gives a closed-form likelihood for one player's skill, and the
posterior moments follow from one-dimensional quadrature.
"""

import math

import numpy as np
from scipy.integrate import quad
from scipy.optimize import brentq
from scipy.stats import norm

MU0 = 25.0
SIGMA0 = 25.0 / 3.0
BETA = SIGMA0 / 2.0
TAU = SIGMA0 / 100.0
DRAW_PROBABILITY = 0.10


def draw_margin_bisect(p_draw: float, beta: float) -> float:
    """Invert p_draw = 2 Phi(eps / (sqrt(2) beta)) - 1 by root bracketing."""
    return brentq(lambda e: 2.0 * norm.cdf(e / (math.sqrt(2.0) * beta)) - 1.0 - p_draw,
                  0.0, 100.0, xtol=1e-13)


def posterior_moments(mu_s, sigma_s, mu_o, sigma_o, beta, eps, result):
    """Posterior (mean, std) of the subject's skill given one outcome.

    ``result`` is "win", "loss", or "draw" from the subject's point of view.
    """
    q = math.sqrt(2.0 * beta * beta + sigma_o * sigma_o)

    def likelihood(s):
        if result == "win":
            return norm.cdf((s - mu_o - eps) / q)
        if result == "loss":
            return norm.cdf((mu_o - s - eps) / q)
        return norm.cdf((s - mu_o + eps) / q) - norm.cdf((s - mu_o - eps) / q)

    lo = mu_s - 12.0 * sigma_s
    hi = mu_s + 12.0 * sigma_s

    def integrand(s, k):
        return (s ** k) * norm.pdf(s, mu_s, sigma_s) * likelihood(s)

    z = quad(integrand, lo, hi, args=(0,), limit=400)[0]
    m1 = quad(integrand, lo, hi, args=(1,), limit=400)[0] / z
    m2 = quad(integrand, lo, hi, args=(2,), limit=400)[0] / z
    return m1, math.sqrt(max(m2 - m1 * m1, 0.0))


def oracle_update(mu_a, sigma_a, mu_b, sigma_b, result,
                  beta=BETA, tau=TAU, p_draw=DRAW_PROBABILITY):
    """Posterior for both players after one match (a's result given)."""
    sa = math.sqrt(sigma_a * sigma_a + tau * tau)
    sb = math.sqrt(sigma_b * sigma_b + tau * tau)
    eps = draw_margin_bisect(p_draw, beta)
    flip = {"win": "loss", "loss": "win", "draw": "draw"}[result]
    a = posterior_moments(mu_a, sa, mu_b, sb, beta, eps, result)
    b = posterior_moments(mu_b, sb, mu_a, sa, beta, eps, flip)
    return a, b


def main():
    eps = draw_margin_bisect(DRAW_PROBABILITY, BETA)
    print(f"draw margin eps = {eps:.12f}")

    (wa, wsa), (wb, wsb) = oracle_update(MU0, SIGMA0, MU0, SIGMA0, "win")
    print(f"fresh win:  winner = ({wa:.6f}, {wsa:.6f})  loser = ({wb:.6f}, {wsb:.6f})")

    (da, dsa), (db, dsb) = oracle_update(MU0, SIGMA0, MU0, SIGMA0, "draw")
    print(f"fresh draw: a = ({da:.6f}, {dsa:.6f})  b = ({db:.6f}, {dsb:.6f})")

    rng = np.random.default_rng(20260815)
    triples = []
    for _ in range(50):
        mu_a = float(rng.uniform(15.0, 35.0))
        mu_b = float(rng.uniform(15.0, 35.0))
        sigma_a = float(rng.uniform(2.0, 9.0))
        sigma_b = float(rng.uniform(2.0, 9.0))
        result = ["win", "loss", "draw"][int(rng.integers(0, 3))]
        a, b = oracle_update(mu_a, sigma_a, mu_b, sigma_b, result)
        triples.append((mu_a, sigma_a, mu_b, sigma_b, result, a, b))
    print("randomized triples (inputs -> posterior a, posterior b):")
    for mu_a, sigma_a, mu_b, sigma_b, result, a, b in triples[:5]:
        print(f"  ({mu_a:.4f}, {sigma_a:.4f}) vs ({mu_b:.4f}, {sigma_b:.4f}) {result}:"
              f" a=({a[0]:.6f}, {a[1]:.6f}) b=({b[0]:.6f}, {b[1]:.6f})")


if __name__ == "__main__":
    main()
