import numpy as np
import pytest

from styledub import autodiff as ad
from styledub.autodiff import ShapeError, Tape, backward, finite_diff_check
from styledub.nets import (
    LstmCell,
    discriminator_forward,
    discriminator_graph,
    from_step_major,
    generator_forward,
    generator_graph,
    identity_generator,
    init_discriminator,
    init_generator,
    lstm_sequence,
    lstm_sequence_composed,
    lstm_step,
    to_step_major,
    zero_generator,
)


def test_step_major_layout():
    w = np.arange(2 * 3 * 4, dtype=float).reshape(2, 3, 4)
    rows = to_step_major(w)
    assert np.array_equal(rows[1], w[1, 0])  # row n*B + b
    assert np.array_equal(rows[2], w[0, 1])
    assert np.array_equal(from_step_major(rows, 3), w)


def test_lstm_zero_weights_zero_state():
    cell = LstmCell.zeros(3, 4)
    h, c = lstm_step(cell, np.array([1.0, -2.0, 5.0]))
    assert np.array_equal(h, np.zeros(4)) and np.array_equal(c, np.zeros(4))


def test_lstm_zero_weights_hand_values():
    cell = LstmCell.zeros(3, 4)
    h, c = lstm_step(cell, np.ones(3), (np.zeros(4), np.full(4, 2.0)))
    assert np.array_equal(c, np.ones(4))
    assert np.allclose(h, 0.3807970780, atol=1e-10)
    assert np.allclose(h, 0.5 * np.tanh(1.0), rtol=0, atol=1e-15)


def test_lstm_gate_equations():
    rng = np.random.default_rng(0)
    cell = LstmCell(rng.standard_normal((8, 3)), rng.standard_normal((8, 2)), rng.standard_normal(8))
    x, h0, c0 = rng.standard_normal(3), rng.standard_normal(2), rng.standard_normal(2)
    z = cell.w_ih @ x + cell.w_hh @ h0 + cell.bias
    sig = lambda v: 1 / (1 + np.exp(-v))  # noqa: E731
    i, f, g, o = sig(z[0:2]), sig(z[2:4]), np.tanh(z[4:6]), sig(z[6:8])
    c = f * c0 + i * g
    h, c_out = lstm_step(cell, x, (h0, c0))
    assert np.allclose(c_out, c, atol=1e-14)
    assert np.allclose(h, o * np.tanh(c), atol=1e-14)


def test_lstm_step_shape_errors():
    cell = LstmCell.zeros(3, 4)
    with pytest.raises(ShapeError):
        lstm_step(cell, np.ones(5))
    with pytest.raises(ShapeError):
        lstm_step(cell, np.ones(3), (np.zeros(3), np.zeros(4)))


def test_lstm_step_gradient():
    rng = np.random.default_rng(1)
    leaves = [rng.standard_normal((8, 3)) * 0.7, rng.standard_normal((8, 2)) * 0.7, rng.standard_normal(8) * 0.5]
    x, h0, c0 = rng.standard_normal((2, 3)), rng.standard_normal((2, 2)), rng.standard_normal((2, 2))

    def f(w_ih, w_hh, bias):
        h, _ = lstm_step({"w_ih": w_ih, "w_hh": w_hh, "bias": bias}, x, (h0, c0))
        return ad.sum(h)

    assert finite_diff_check(f, leaves).passed


def test_fused_lstm_matches_composed():
    rng = np.random.default_rng(2)
    steps, batch, n_in, hid = 7, 3, 5, 4
    cell = LstmCell.init(rng, n_in, hid)
    x = rng.standard_normal((steps * batch, n_in))
    proj = rng.standard_normal((steps * batch, hid))
    results = []
    for fn in (lstm_sequence, lstm_sequence_composed):
        tape = Tape()
        xv = tape.leaf(x)
        ws = [tape.leaf(getattr(cell, k)) for k in ("w_ih", "w_hh", "bias")]
        y = fn(xv, steps, *ws)
        g = backward(tape, ad.sum(y * tape.constant(proj)))
        results.append((y.data, [g[v.id] for v in [xv, *ws]]))
    (y1, g1), (y2, g2) = results
    assert np.allclose(y1, y2, rtol=0, atol=1e-14)
    for a, b in zip(g1, g2):
        assert np.allclose(a, b, rtol=1e-12, atol=1e-13)


def test_fused_lstm_gradients():
    rng = np.random.default_rng(3)
    steps, batch = 7, 2
    cell = LstmCell.init(rng, 3, 4)
    leaves = [rng.standard_normal((steps * batch, 3)), cell.w_ih, cell.w_hh, cell.bias]
    proj = rng.standard_normal((steps * batch, 4))

    def f(x, w_ih, w_hh, bias):
        return ad.sum(lstm_sequence(x, steps, w_ih, w_hh, bias) * x.tape.constant(proj))

    report = finite_diff_check(f, leaves)
    assert report.passed, report.max_rel_error


def test_zero_generator_outputs_zero():
    g = zero_generator(dim=8, width=16)
    win = np.random.default_rng(4).standard_normal((7, 8))
    assert np.array_equal(generator_forward(g, win), np.zeros((7, 8)))


def test_generator_output_shape_and_determinism():
    g = init_generator(np.random.default_rng(5), dim=64, width=128)
    win = np.random.default_rng(6).standard_normal((7, 64))
    out = generator_forward(g, win)
    assert out.shape == (7, 64)
    assert np.array_equal(out, generator_forward(g, win.copy()))


def test_default_generator_widths():
    g = init_generator(np.random.default_rng(0))
    assert g.params["l1.w"].shape == (1024, 64)
    assert g.params["l2.w"].shape == (1024, 1024)
    assert g.params["l3.w_hh"].shape == (4096, 1024)
    assert g.params["out.w"].shape == (64, 1024)


def test_default_discriminator_widths():
    d = init_discriminator(np.random.default_rng(0))
    shapes = {k: v.shape for k, v in d.params.items()}
    assert shapes["l1.w"] == (64, 64)
    assert shapes["l2.w"] == (32, 64)
    assert shapes["l3.w_ih"] == (64, 32) and shapes["l3.w_hh"] == (64, 16)
    assert shapes["l4.w"] == (8, 16)
    assert shapes["l5.w"] == (4, 8)
    assert shapes["out.w"] == (1, 4)


def test_identity_generator_is_identity():
    g = identity_generator(dim=64)
    win = np.random.default_rng(7).standard_normal((3, 7, 64))
    assert np.array_equal(generator_forward(g, win), win)


def test_residual_block_with_zero_branch_is_identity():
    rng = np.random.default_rng(8)
    tape = Tape()
    h = tape.constant(np.abs(rng.standard_normal((5, 6))))
    w, b = tape.constant(np.zeros((6, 6))), tape.constant(np.zeros(6))
    out = h + ad.relu(ad.linear(h, w, b))
    assert np.array_equal(out.data, h.data)


def test_identity_init_is_near_identity():
    g = init_generator(np.random.default_rng(9), dim=64, width=256)
    win = np.random.default_rng(10).standard_normal((4, 7, 64))
    out = generator_forward(g, win)
    assert np.abs(out - win).mean() < 0.5 * np.abs(win).mean()


def test_discriminator_zero_weights_score_half():
    d = init_discriminator(np.random.default_rng(11), dim=64)
    for v in d.params.values():
        v[...] = 0.0
    scores = discriminator_forward(d, np.random.default_rng(12).standard_normal((7, 64)))
    assert scores.shape == (7,)
    assert np.array_equal(scores, np.full(7, 0.5))


def test_discriminator_scores_in_open_interval():
    d = init_discriminator(np.random.default_rng(13), dim=64)
    scores = discriminator_forward(d, np.random.default_rng(14).standard_normal((5, 7, 64)) * 10)
    assert scores.shape == (5, 7)
    assert np.all((scores > 0) & (scores < 1))


def test_wrong_step_dimension():
    g = init_generator(np.random.default_rng(0), dim=64, width=128)
    d = init_discriminator(np.random.default_rng(0), dim=64)
    with pytest.raises(ShapeError):
        generator_forward(g, np.zeros((7, 63)))
    with pytest.raises(ShapeError):
        discriminator_forward(d, np.zeros((7, 65)))


def test_windows_are_independent():
    g = init_generator(np.random.default_rng(15), dim=64, width=128)
    d = init_discriminator(np.random.default_rng(16), dim=64)
    rng = np.random.default_rng(17)
    a, b = rng.standard_normal((7, 64)), rng.standard_normal((7, 64))
    for net in (g, d):
        ab = net(np.stack([a, b]))
        ba = net(np.stack([b, a]))
        assert np.array_equal(ab[0], ba[1]) and np.array_equal(ab[1], ba[0])
        # a different batch size changes BLAS blocking, so only the last bits may differ
        assert np.allclose(ab[0], net(a), rtol=1e-12, atol=1e-12)


def _net_fd(net, graph, rng, batch=2, steps=7):
    names = list(net.params)
    x = rng.standard_normal((steps * batch, net.dims["dim"]))

    def f(*vals):
        bound = dict(zip(names, vals))
        y = graph(bound, vals[0].tape.constant(x), steps)
        return ad.sum(ad.tanh(y))

    return finite_diff_check(f, [net.params[k] for k in names], sample=12, rng=rng)


def test_generator_gradients_small_width():
    rng = np.random.default_rng(18)
    g = init_generator(rng, dim=8, width=16)
    report = _net_fd(g, generator_graph, rng)
    assert report.passed, report.max_rel_error


def test_discriminator_gradients_small_width():
    rng = np.random.default_rng(19)
    d = init_discriminator(rng, dim=8, width=32)
    report = _net_fd(d, discriminator_graph, rng)
    assert report.passed, report.max_rel_error
