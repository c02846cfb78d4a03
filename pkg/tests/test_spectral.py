import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kahlerflow.spectral import (
    complex_hessian,
    dealias,
    gradient_dz,
    gradient_norm_sq,
    laplacian,
    mean_normalize,
    third_order_derivatives,
    third_order_S,
    workspace,
)
from kahlerflow.torus import (
    HermitianField,
    ScalarField,
    TorusDomain,
    det_array,
    fourier_modes_field,
    integrate,
    make_flat_metric,
    perturb_metric,
)

from conftest import random_modes


def trig_eval(modes, periods, xs):
    """Evaluate sum A cos(2 pi k.x / L + phase) at arbitrary points."""
    out = 0.0
    for k, amp, ph in modes:
        arg = ph + sum(2 * np.pi * kd * x / p for kd, x, p in zip(k, xs, periods))
        out = out + amp * np.cos(arg)
    return out


def trig_derivative(modes, periods, xs, dirs):
    """Exact partial derivative along real directions ``dirs``."""
    out = 0.0
    for k, amp, ph in modes:
        kap = [2 * np.pi * kd / p for kd, p in zip(k, periods)]
        arg = ph + sum(kk * x for kk, x in zip(kap, xs))
        fac = amp * np.prod([kap[d] for d in dirs]) if dirs else amp
        # d^m/dx^m cos = cos(arg + m pi / 2)
        out = out + fac * np.cos(arg + len(dirs) * np.pi / 2)
    return out


def exact_hessian(modes, dom):
    xs = dom.coords()
    n = dom.n
    p = dom.periods
    H = np.empty(dom.shape + (n, n), complex)
    for i in range(n):
        for j in range(n):
            xi, yi, xj, yj = 2 * i, 2 * i + 1, 2 * j, 2 * j + 1
            re = trig_derivative(modes, p, xs, [xi, xj]) + trig_derivative(modes, p, xs, [yi, yj])
            im = trig_derivative(modes, p, xs, [xi, yj]) - trig_derivative(modes, p, xs, [yi, xj])
            H[..., i, j] = 0.25 * (re + 1j * im) * np.ones(dom.shape)
    return H


def fd_second(modes, dom, a, b, h):
    """Fourth-order centred difference of the analytic field at the grid nodes."""
    xs = dom.coords()
    p = dom.periods

    def shifted(da, db):
        ys = list(xs)
        ys[a] = ys[a] + da
        ys[b] = ys[b] + db
        return trig_eval(modes, p, ys) * np.ones(dom.shape)

    if a == b:
        c = [(-2, -1.0), (-1, 16.0), (0, -30.0), (1, 16.0), (2, -1.0)]
        return sum(w * shifted(s * h, 0.0) for s, w in c) / (12 * h * h)
    w1 = [(-2, 1.0), (-1, -8.0), (1, 8.0), (2, -1.0)]
    return sum(wa * wb * shifted(sa * h, sb * h) for sa, wa in w1 for sb, wb in w1) / (144 * h * h)


def fd_hessian(modes, dom, h=1e-3):
    n = dom.n
    H = np.empty(dom.shape + (n, n), complex)
    for i in range(n):
        for j in range(n):
            xi, yi, xj, yj = 2 * i, 2 * i + 1, 2 * j, 2 * j + 1
            re = fd_second(modes, dom, xi, xj, h) + fd_second(modes, dom, yi, yj, h)
            im = fd_second(modes, dom, xi, yj, h) - fd_second(modes, dom, yi, xj, h)
            H[..., i, j] = 0.25 * (re + 1j * im)
    return H


def test_transform_round_trip():
    rng = np.random.default_rng(0)
    dom = TorusDomain(2, (8, 16))
    ws = workspace(dom)
    u = rng.standard_normal(dom.shape)
    back = ws.inverse(ws.forward(u))
    assert np.max(np.abs(back - u)) < 1e-13 * np.max(np.abs(u))


def test_hessian_examples():
    dom = TorusDomain(1, 32)
    assert np.all(complex_hessian(ScalarField(dom, np.zeros(dom.shape))).entries == 0)
    u = fourier_modes_field(dom, [((1, 0), 1.0, 0.0)])
    x = dom.coords()[0]
    h = complex_hessian(u).entries[..., 0, 0]
    assert np.max(np.abs(h - (-np.pi ** 2 * np.cos(2 * np.pi * x)))) < 1e-12


@pytest.mark.parametrize("n,grid,periods", [(1, 32, 1.0), (2, 16, (1.0, 2.0, 1.5, 1.0))])
def test_hessian_exact_on_band(n, grid, periods):
    rng = np.random.default_rng(10 + n)
    dom = TorusDomain(n, grid, periods)
    modes = random_modes(rng, n, grid // 2 - 1, 6, 1.0)
    u = fourier_modes_field(dom, modes)
    got = complex_hessian(u).entries
    ref = exact_hessian(modes, dom)
    assert np.max(np.abs(got - ref)) <= 1e-12 * np.max(np.abs(ref))


@pytest.mark.parametrize("n,grid", [(1, 64), (2, (64, 8))])
def test_hessian_matches_finite_differences(n, grid):
    rng = np.random.default_rng(20 + n)
    dom = TorusDomain(n, grid)
    modes = random_modes(rng, n, 2, 5, 0.3)
    got = complex_hessian(fourier_modes_field(dom, modes)).entries
    ref = fd_hessian(modes, dom)
    assert np.max(np.abs(got - ref)) < 1e-6


def test_hessian_hermitian_and_mean_zero():
    rng = np.random.default_rng(5)
    dom = TorusDomain(2, 8)
    u = ScalarField(dom, rng.standard_normal(dom.shape))
    h = complex_hessian(u)
    assert h.hermitian_defect() < 1e-13
    assert np.max(np.abs(h.entries.mean(axis=(0, 1, 2, 3)))) < 1e-13


def test_third_derivatives_equal_derivative_of_hessian():
    rng = np.random.default_rng(6)
    dom = TorusDomain(2, 16)
    modes = random_modes(rng, 2, 5, 6, 0.1)
    u = fourier_modes_field(dom, modes)
    t = third_order_derivatives(u)
    h = complex_hessian(u).entries
    ws = workspace(dom)
    for i in range(2):
        for j in range(2):
            # differentiate the complex entry through its real and imaginary parts
            for k in range(2):
                re = ws.apply(ws.dz[k], ws.forward(h[..., i, j].real))
                im = ws.apply(ws.dz[k], ws.forward(h[..., i, j].imag))
                assert np.max(np.abs(t[..., i, j, k] - (re + 1j * im))) < 1e-12 * np.max(np.abs(t))


def test_laplacian_examples():
    d1 = TorusDomain(1, 32)
    g1 = make_flat_metric(d1, [[1]])
    u = fourier_modes_field(d1, [((1, 0), 1.0, 0.0)])
    x = d1.coords()[0]
    assert np.max(np.abs(laplacian(u, g1).values + np.pi ** 2 * np.cos(2 * np.pi * x))) < 1e-12
    zero = ScalarField(d1, np.zeros(d1.shape))
    assert np.all(laplacian(zero, g1).values == 0)
    d2 = TorusDomain(2, 8)
    g2 = make_flat_metric(d2, np.diag([1.0, 2.0]))
    u2 = fourier_modes_field(d2, [((0, 0, 1, 0), 1.0, 0.0)])
    x2 = d2.coords()[2]
    expect = -(np.pi ** 2 / 2) * np.cos(2 * np.pi * x2)
    assert np.max(np.abs(laplacian(u2, g2).values - expect)) < 1e-12


def test_laplacian_integrates_to_zero():
    rng = np.random.default_rng(7)
    dom = TorusDomain(2, 8)
    g = make_flat_metric(dom, [[1.2, 0.1 - 0.2j], [0.1 + 0.2j, 0.9]])
    u = ScalarField(dom, rng.standard_normal(dom.shape))
    assert abs(integrate(laplacian(u, g))) < 1e-10


def test_gradient_norm_examples():
    dom = TorusDomain(1, 32)
    g = make_flat_metric(dom, [[1]])
    assert np.max(np.abs(gradient_norm_sq(ScalarField(dom, np.full(dom.shape, 3.0)), g).values)) < 1e-20
    u = fourier_modes_field(dom, [((1, 0), 1.0, -np.pi / 2)])     # sin(2 pi x)
    x = dom.coords()[0]
    expect = np.pi ** 2 * np.cos(2 * np.pi * x) ** 2
    assert np.max(np.abs(gradient_norm_sq(u, g).values - expect)) < 1e-12


def test_gradient_norm_matches_finite_differences():
    rng = np.random.default_rng(8)
    dom = TorusDomain(2, (32, 16))
    modes = random_modes(rng, 2, 2, 5, 0.3)
    u = fourier_modes_field(dom, modes)
    gm = np.array([[1.3, 0.2 + 0.4j], [0.2 - 0.4j, 0.8]])
    g = make_flat_metric(dom, gm)
    got = gradient_norm_sq(u, g).values
    # real gradient by fourth-order differences, then |du/dz|^2 form by hand
    h = 1e-3
    xs = dom.coords()
    grads = []
    for d in range(4):
        def at(s):
            ys = list(xs)
            ys[d] = ys[d] + s * h
            return trig_eval(modes, dom.periods, ys) * np.ones(dom.shape)
        grads.append((at(-2) - 8 * at(-1) + 8 * at(1) - at(2)) / (12 * h))
    dz = [0.5 * (grads[2 * i] - 1j * grads[2 * i + 1]) for i in range(2)]
    ginv = np.linalg.inv(gm)
    ref = sum(ginv[j, i] * dz[i] * np.conj(dz[j]) for i in range(2) for j in range(2)).real
    assert np.max(np.abs(got - ref)) < 1e-6


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 31))
def test_gradient_norm_nonnegative(seed):
    rng = np.random.default_rng(seed)
    dom = TorusDomain(2, 8)
    u = ScalarField(dom, rng.standard_normal(dom.shape))
    g = make_flat_metric(dom, [[2.0, 0.5j], [-0.5j, 1.0]])
    assert np.min(gradient_norm_sq(u, g).values) >= -1e-13


def test_mean_normalize_examples():
    dom = TorusDomain(1, 16)
    assert np.max(np.abs(mean_normalize(ScalarField(dom, np.full(dom.shape, 5.0))).values)) == 0
    c = fourier_modes_field(dom, [((1, 0), 1.0, 0.0)])
    assert np.max(np.abs(mean_normalize(c + 3.0).values - c.values)) < 1e-14
    rng = np.random.default_rng(9)
    u = ScalarField(dom, rng.standard_normal(dom.shape))
    psi = fourier_modes_field(dom, [((1, 1), 0.02, 0.0)])
    dv = ScalarField(dom, det_array(perturb_metric(make_flat_metric(dom, [[1]]), psi).entries))
    assert abs(integrate(mean_normalize(u, dv), dv)) < 1e-12


def test_third_order_S_examples():
    dom = TorusDomain(1, 32)
    g = make_flat_metric(dom, [[1]])
    zero = ScalarField(dom, np.zeros(dom.shape))
    assert np.all(third_order_S(zero, g).values == 0)
    eps = 0.03
    u = fourier_modes_field(dom, [((1, 0), eps, 0.0)])
    gt = perturb_metric(g, u)
    x = dom.coords()[0]
    # closed form: u_zzbar = -eps pi^2 cos, u_zzbar,z = (1/2) d/dx of it
    uzz = -eps * np.pi ** 2 * np.cos(2 * np.pi * x)
    uzzz = 0.5 * eps * np.pi ** 2 * 2 * np.pi * np.sin(2 * np.pi * x)
    S_ref = uzzz ** 2 / (1 + uzz) ** 3
    assert np.max(np.abs(third_order_S(u, gt).values - S_ref)) < 1e-8
    um = ScalarField(dom, -u.values)
    s_plus = third_order_S(u, gt).values
    s_minus = third_order_S(um, perturb_metric(g, um)).values
    assert abs(np.max(s_plus) - np.max(s_minus)) < 1e-12 * np.max(s_plus)


def test_dealias_examples():
    dom = TorusDomain(1, 32)
    low = fourier_modes_field(dom, [((3, 2), 1.0, 0.4), ((10, -5), 0.5, 0.0)])
    assert np.max(np.abs(dealias(low).values - low.values)) < 1e-13
    high = fourier_modes_field(dom, [((12, 0), 1.0, 0.0)])
    assert np.max(np.abs(dealias(high).values)) < 1e-13
    rng = np.random.default_rng(11)
    u = ScalarField(dom, rng.standard_normal(dom.shape))
    once = dealias(u)
    # idempotent up to one transform round trip
    assert np.max(np.abs(dealias(once).values - once.values)) < 1e-15
    cu = ScalarField(dom, rng.standard_normal(dom.shape) + 1j * rng.standard_normal(dom.shape))
    assert np.max(np.abs(dealias(cu).values.real - dealias(ScalarField(dom, cu.values.real)).values)) < 1e-13


def test_gradient_dz_shape():
    dom = TorusDomain(2, 8)
    u = fourier_modes_field(dom, [((1, 0, 0, 0), 1.0, 0.0)])
    assert gradient_dz(u).shape == dom.shape + (2,)
