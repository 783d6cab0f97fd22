import numpy as np
import pytest

from drdeeg.decoder import DecoderArch, DecoderObjective, init_params
from drdeeg.evolve import (
    EvolutionConfig,
    distance_grad,
    evolve,
    evolve_batch,
    hmc_step,
    langevin_step,
    mixed_hvp,
    potential_grad,
)
from drdeeg.seeding import stream
from toys import HalfSquare, LinearRegression, Logistic, Zero

QUIET = dict(noise=False)


def cfg(**kw):
    base = dict(alpha=0.1, beta=0.0, gamma=0.0, steps=5, distance="wb", noise=False)
    base.update(kw)
    return EvolutionConfig(**base)


# -- potential gradient -----------------------------------------------------

def test_potential_grad_pure_loss():
    g = potential_grad(HalfSquare(), np.zeros(1), np.array([[1.0]]), np.array([[1.0]]),
                       np.zeros(1), None, cfg())
    assert g[0, 0] == -1.0


def test_potential_grad_with_wb_penalty():
    g = potential_grad(HalfSquare(), np.zeros(1), np.array([[1.0]]), np.array([[1.1]]),
                       np.zeros(1), None, cfg(gamma=0.5))
    assert g[0, 0] == pytest.approx(-1.1 + 2 * 0.5 * 0.1, abs=1e-15)
    assert g[0, 0] == pytest.approx(-1.0, abs=1e-12)


@pytest.mark.parametrize("distance", ["wb", "kl"])
def test_penalty_vanishes_at_anchor(distance):
    x = np.array([[0.3, -2.0]])
    c = cfg(gamma=7.5, distance=distance)
    assert np.array_equal(distance_grad(c, x, x), np.zeros_like(x))
    g = potential_grad(HalfSquare(), np.zeros(1), x, x, np.zeros(1), None, c)
    assert np.array_equal(g, -x)


def test_distance_grad_modes():
    d = np.array([[0.1]])
    assert distance_grad(cfg(gamma=0.5), d, np.zeros((1, 1)))[0, 0] == pytest.approx(0.1, abs=1e-15)
    kl = cfg(gamma=0.5, distance="kl", kl_sigma2=1.0)
    assert distance_grad(kl, np.array([[0.2]]), np.zeros((1, 1)))[0, 0] == pytest.approx(0.1, abs=1e-15)
    kl4 = cfg(gamma=0.5, distance="kl", kl_sigma2=4.0)
    assert distance_grad(kl4, np.array([[0.2]]), np.zeros((1, 1)))[0, 0] == pytest.approx(0.025)
    for mode in ("wb", "kl"):
        z = distance_grad(cfg(gamma=0.0, distance=mode), np.array([[3.0]]), np.zeros((1, 1)))
        assert np.array_equal(z, np.zeros((1, 1)))


# -- mixed second derivative -----------------------------------------------

def test_mixed_hvp_linear_hand_example():
    theta = np.array([1.0, 0.0])
    x = np.array([[1.0, 1.0]])
    g = np.array([[1.0, 1.0]])
    analytic = LinearRegression.mixed(theta, x[0], 0.0, g[0])
    np.testing.assert_array_equal(analytic, [3.0, 1.0])
    got = mixed_hvp(LinearRegression(), theta, x, np.array([0.0]), g, 1e-4)
    assert np.max(np.abs(got[0] - analytic)) / np.max(np.abs(analytic)) < 1e-4


def test_mixed_hvp_zero_direction():
    got = mixed_hvp(LinearRegression(), np.array([1.0, 2.0]), np.ones((2, 2)),
                    np.zeros(2), np.zeros((2, 2)), 1e-4)
    assert np.array_equal(got, np.zeros((2, 2)))


def test_mixed_hvp_vanishes_when_loss_ignores_theta():
    got = mixed_hvp(HalfSquare(), np.array([0.5, -0.2]), np.array([[1.0, 2.0]]),
                    np.zeros(1), np.array([[0.3, 0.4]]), 1e-4)
    assert np.max(np.abs(got)) < 1e-8


def test_mixed_hvp_rows_independent():
    rng = np.random.default_rng(0)
    theta = rng.standard_normal(3)
    x = rng.standard_normal((4, 3))
    y = np.array([1.0, -1.0, 1.0, -1.0])
    g = rng.standard_normal((4, 3))
    g[2] = 0.0
    batch = mixed_hvp(Logistic(), theta, x, y, g, 1e-4)
    for i in range(4):
        one = mixed_hvp(Logistic(), theta, x[i:i + 1], y[i:i + 1], g[i:i + 1], 1e-4)
        np.testing.assert_allclose(batch[i], one[0], atol=1e-14)
    assert np.array_equal(batch[2], np.zeros(3))


@pytest.mark.parametrize("model", [LinearRegression(), Logistic()], ids=["linear", "logistic"])
def test_mixed_hvp_matches_analytic(model):
    rng = np.random.default_rng(11)
    for _ in range(25):
        d = int(rng.integers(2, 6))
        theta = rng.standard_normal(d)
        x = rng.standard_normal(d)
        y = float(rng.choice([-1.0, 1.0]))
        g = rng.standard_normal(d)
        got = mixed_hvp(model, theta, x[None], np.array([y]), g[None], 1e-4)[0]
        ref = model.mixed(theta, x, y, g)
        assert np.max(np.abs(got - ref)) / np.max(np.abs(ref)) < 1e-3


# -- single steps -----------------------------------------------------------

def test_langevin_step_ascends_quadratic():
    x1 = langevin_step(np.array([1.0]), np.array([-1.0]), cfg(alpha=0.1))
    assert x1[0] == pytest.approx(1.1, abs=1e-15)


def test_langevin_zero_rate_is_identity():
    x = np.array([[0.4, -1.3]])
    c = EvolutionConfig(alpha=0.0, gamma=0.5, distance="kl")
    assert np.array_equal(langevin_step(x, np.ones_like(x), c, stream(0, "t")), x)
    c = EvolutionConfig(alpha=0.0, distance="wb")
    assert np.array_equal(langevin_step(x, np.ones_like(x), c, stream(0, "t")), x)


def test_noise_scales():
    assert EvolutionConfig(alpha=0.05, distance="wb").noise_scale == pytest.approx(np.sqrt(0.1))
    assert EvolutionConfig(alpha=0.05, gamma=0.5, distance="kl").noise_scale == pytest.approx(np.sqrt(0.05))
    assert EvolutionConfig(noise=False).noise_scale == 0.0


def test_documented_defaults():
    c = EvolutionConfig()
    assert (c.alpha, c.steps, c.beta) == (0.05, 5, 0.003)


def test_hmc_step_index_t_order():
    c = cfg(alpha=0.1, tau=0.1, dynamics="hmc")
    x1, v1 = hmc_step(np.array([1.0]), np.array([0.0]), np.array([-1.0]), c)
    assert x1[0] == 1.0
    assert v1[0] == pytest.approx(0.1, abs=1e-15)


def test_hmc_force_free_drift():
    c = cfg(alpha=0.0, tau=0.0, dynamics="hmc", noise=True)
    x1, v1 = hmc_step(np.array([2.0]), np.array([0.5]), np.array([123.0]), c, stream(0, "t"))
    assert x1[0] == 2.5 and v1[0] == 0.5


def test_hmc_energy_growth_matches_scalar_oracle():
    # Scalar oracle for U = x^2/2 (grad U = x), tau = 0, no noise:
    #   x' = x + v, v' = v - a x  =>  H = v^2/2 + a x^2/2 grows by exactly (1 + a) per step.
    for alpha in (0.01, 0.005):
        c = cfg(alpha=alpha, tau=0.0, dynamics="hmc")
        x, v = np.array([1.0]), np.array([0.0])
        h0 = 0.5 * v[0] ** 2 + 0.5 * alpha * x[0] ** 2
        xs, vs = 1.0, 0.0
        for _ in range(100):
            x, v = hmc_step(x, v, x, c)
            xs, vs = xs + vs, vs - alpha * xs
        assert x[0] == xs and v[0] == vs
        h = 0.5 * v[0] ** 2 + 0.5 * alpha * x[0] ** 2
        assert h / h0 == pytest.approx((1 + alpha) ** 100, rel=1e-9)
        assert h / h0 < np.e ** (100 * alpha) + 1e-12


# -- full evolution ---------------------------------------------------------

ARCH = DecoderArch(4, 16, 3, f1=3, f2=4, f3=4, temporal_kernel=5)


def _decoder_case(seed, n=3):
    rng = np.random.default_rng(seed)
    theta = init_params(ARCH, seed).flat
    x = rng.standard_normal((n, 16, 4))
    y = rng.integers(0, 3, n)
    return DecoderObjective(ARCH), theta, x, y


@pytest.mark.parametrize("dynamics", ["ld", "hmc"])
@pytest.mark.parametrize("distance", ["kl", "wb"])
def test_evolve_shapes_and_determinism(dynamics, distance):
    obj, theta, x, y = _decoder_case(0)
    c = EvolutionConfig(dynamics=dynamics, distance=distance, steps=4, seed=3)
    a = evolve_batch(obj, theta, x, y, c)
    b = evolve_batch(obj, theta, x, y, c)
    assert a.x_prime.shape == x.shape
    assert a.trace.shape == (4, 3)
    assert np.array_equal(a.x_prime, b.x_prime)
    assert np.array_equal(a.trace, b.trace)
    assert (a.v is None) == (dynamics == "ld")
    assert not np.array_equal(a.x_prime, x)


def test_evolve_single_matches_batch_row():
    obj, theta, x, y = _decoder_case(1)
    c = EvolutionConfig(steps=3, seed=5)
    rngs = [stream(9, "e", i) for i in range(3)]
    batch = evolve_batch(obj, theta, x, y, c, rngs)
    one = evolve(obj, theta, x[1], y[1], c, stream(9, "e", 1))
    assert one.x_prime.shape == x[1].shape
    assert len(one.trace) == 3
    np.testing.assert_allclose(one.x_prime, batch.x_prime[1], atol=1e-12)


def test_evolve_trace_is_loss_of_final_particle():
    obj, theta, x, y = _decoder_case(2)
    out = evolve_batch(obj, theta, x, y, EvolutionConfig(steps=2))
    losses, _, _ = obj(theta, out.x_prime, y, wrt="none")
    np.testing.assert_array_equal(out.trace[-1], losses)


def test_evolve_rejects_zero_steps():
    with pytest.raises(ValueError, match="steps"):
        EvolutionConfig(steps=0)
    with pytest.raises(ValueError):
        EvolutionConfig(dynamics="hmc", tau=1.5)
    with pytest.raises(ValueError):
        EvolutionConfig(kl_sigma2=0.0)


def test_noise_free_ascent_on_decoder():
    obj, theta, x, y = _decoder_case(4, n=8)
    out = evolve_batch(obj, theta, x, y, EvolutionConfig(alpha=1e-3, beta=0, gamma=0, noise=False))
    assert np.all(np.diff(out.trace, axis=0) >= 0)
    start, _, _ = obj(theta, x, y, wrt="none")
    assert np.all(out.trace[0] >= start)


def test_beta_steers_along_mixed_direction():
    theta = np.array([0.8, -0.5, 0.3])
    x0 = np.array([[0.4, 1.0, -0.7]])
    y = np.array([0.2])
    model = LinearRegression()
    _, g0, _ = model(theta[None], x0, y, wrt="theta")
    direction = LinearRegression.mixed(theta, x0[0], y[0], g0[0])
    proj = []
    for beta in (0.0, 0.5, 1.0, 2.0):
        c = EvolutionConfig(alpha=0.01, beta=beta, gamma=0.3, steps=5, distance="wb", seed=1)
        out = evolve_batch(model, theta, x0, y, c)
        proj.append(float(np.dot(out.x_prime[0], direction)))
    assert all(b > a for a, b in zip(proj, proj[1:]))


def test_stationary_mean_and_variance_wb():
    # L == 0, beta = 0, WB anchor c: x' - c = (1 - 2 a g)(x - c) + sqrt(2a) xi.
    # AR(1) with rho = 1 - 2 a g has stationary variance 2a / (1 - rho^2).
    a, gam, c0 = 0.1, 1.0, 2.0
    rho = 1 - 2 * a * gam
    var_ref = 2 * a / (1 - rho**2)
    c = EvolutionConfig(alpha=a, gamma=gam, beta=0.0, distance="wb", steps=1)
    rng = stream(2024, "ou")
    anchor = np.array([[c0]])
    x = anchor.copy()
    path = np.empty(20_000)
    for t in range(20_000):
        g = potential_grad(Zero(), np.zeros(1), anchor, x, np.zeros(1), None, c)
        x = langevin_step(x, g, c, rng)
        path[t] = x[0, 0]
    tail = path[500:]
    assert abs(tail.mean() - c0) < 0.02 * c0
    assert abs(tail.var() - var_ref) < 0.08 * var_ref
