import gzip
import struct

import numpy as np
import pytest

from latentgeo.datasets import (
    REST_POSTURE,
    Dataset,
    IKError,
    PendulumConfig,
    RobotArmConfig,
    angle_difference,
    circle_targets,
    default_chain,
    ik_solve,
    load_dataset,
    mnist_load,
    pendulum_angle,
    pendulum_generate,
    render_pendulum,
    robot_generate,
    save_dataset,
    track_circle,
)
from latentgeo.numerics import FileFormatError


def test_pendulum_render_properties():
    a = render_pendulum([0.0, 0.0])
    assert a[0].tobytes() == a[1].tobytes()
    for theta in (0.0, 17.0, 90.0, 233.5):
        img, flip = render_pendulum([theta, theta + 180.0])
        np.testing.assert_allclose(flip, img[::-1], atol=1e-6)
    assert a.min() >= 0 and a.max() <= 1


def test_pendulum_generate():
    cfg = PendulumConfig(sample_count=300, rng_seed=7)
    d1, d2 = pendulum_generate(cfg), pendulum_generate(cfg)
    assert d1.samples.shape == (300, 256)
    assert d1.samples.tobytes() == d2.samples.tobytes()
    assert d1.samples.min() >= 0 and d1.samples.max() <= 1
    a = d1.annotations["angle"]
    assert a.min() >= 0 and a.max() < 360
    clean = pendulum_generate(PendulumConfig(sample_count=50, noise_std=0.0, rng_seed=1))
    np.testing.assert_array_equal(clean.samples, render_pendulum(clean.annotations["angle"]))


def test_default_pendulum_size():
    assert pendulum_generate().samples.shape == (15000, 256)


def test_angle_tools():
    assert angle_difference(10.0, 350.0) == pytest.approx(20.0)
    assert angle_difference(0.0, 180.0) == 180.0
    angles = np.array([3.0, 95.5, 181.25, 300.0])
    np.testing.assert_allclose(pendulum_angle(render_pendulum(angles)), angles)


def test_forward_kinematics_and_ik():
    chain = default_chain()
    assert chain.dof == 6
    assert np.sum(np.linalg.norm(chain.links, axis=1)) == pytest.approx(1.2)
    q_rest = REST_POSTURE + chain.zero_offset
    target = np.array([0.6, 0.2, 0.1])
    q, res = ik_solve(chain, target, q_rest, q_rest, max_iters=1000)
    assert res < 1e-6
    assert np.linalg.norm(chain.fk(q) - target) < 1e-6
    J = chain.position_jacobian(q)
    h = 1e-6
    fd = np.stack([(chain.fk(q + h * e) - chain.fk(q - h * e)) / (2 * h) for e in np.eye(6)], axis=1)
    np.testing.assert_allclose(J, fd, atol=1e-8)
    with pytest.raises(IKError):
        ik_solve(chain, np.array([3.0, 0.0, 0.0]), q_rest, q_rest, max_iters=50)


def test_circle_tracking_and_closure():
    cfg = RobotArmConfig(timestep_count=300, noise_std=0.0)
    chain = default_chain()
    Q, targets, res = track_circle(cfg, 300, chain)
    assert res.max() < 1e-6
    fk = np.array([chain.fk(q) for q in Q])
    assert np.abs(fk - targets).max() < 1e-6
    # one more step around the circle returns to the starting posture
    q_back, _ = ik_solve(chain, targets[0], Q[-1], REST_POSTURE + chain.zero_offset)
    assert np.abs(q_back - Q[0]).max() < 1e-3
    assert np.ptp(targets[:, 2]) == 0.0
    np.testing.assert_allclose(np.linalg.norm(circle_targets(cfg, 10) - cfg.center, axis=1), 0.4)


def test_robot_generate_small():
    cfg = RobotArmConfig(timestep_count=120, validation_count=30, rng_seed=4)
    tr, va = robot_generate(cfg)
    assert tr.samples.shape == (120, 6) and va.samples.shape == (30, 6)
    assert set(tr.annotations) == {"timestep", "x", "y", "z"}
    tr2, _ = robot_generate(cfg)
    assert tr.samples.tobytes() == tr2.samples.tobytes()
    assert tr.samples.min() > 0  # softplus-compatible joint coordinates


def test_dataset_round_trip(tmp_path):
    ds = pendulum_generate(PendulumConfig(sample_count=20, rng_seed=2))
    paths = save_dataset(ds, tmp_path / "p.lgds")
    assert [p.name for p in paths] == ["p.lgds", "p.annotations.csv"]
    back = load_dataset(tmp_path / "p.lgds")
    assert back.samples.tobytes() == ds.samples.tobytes()
    np.testing.assert_array_equal(back.annotations["angle"], ds.annotations["angle"])
    raw = (tmp_path / "p.lgds").read_bytes()
    (tmp_path / "p.lgds").write_bytes(raw[:-16])
    with pytest.raises(FileFormatError):
        load_dataset(tmp_path / "p.lgds")
    (tmp_path / "q.lgds").write_bytes(b"nope")
    with pytest.raises(FileFormatError):
        load_dataset(tmp_path / "q.lgds")


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.array([[np.nan]]), {})
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 2)), {"a": np.zeros(2)})


def _idx_images(path, imgs, gz=False, count=None):
    n = len(imgs) if count is None else count
    data = struct.pack(">HBB", 0, 8, 3) + struct.pack(">III", n, 28, 28) + imgs.astype(np.uint8).tobytes()
    (gzip.open if gz else open)(path, "wb").write(data)


def test_mnist_text_and_idx(tmp_path):
    rng = np.random.default_rng(0)
    bits = (rng.random((5, 784)) < 0.3).astype(int)
    txt = tmp_path / "train.txt"
    txt.write_text("\n".join(" ".join(map(str, r)) for r in bits) + "\n")
    ds = mnist_load(txt)
    assert ds.samples.shape == (5, 784) and set(np.unique(ds.samples)) <= {0.0, 1.0}
    np.testing.assert_array_equal(mnist_load(txt, limit=3).samples, bits[:3])

    imgs = rng.integers(0, 256, size=(4, 28, 28))
    p = tmp_path / "imgs-idx3-ubyte.gz"
    _idx_images(p, imgs, gz=True)
    ds = mnist_load(p)
    np.testing.assert_array_equal(ds.samples, (imgs.reshape(4, -1) / 255.0 > 0.5).astype(float))
    bad = tmp_path / "bad-idx3-ubyte"
    _idx_images(bad, imgs, count=5)
    with pytest.raises(FileFormatError):
        mnist_load(bad)
    txt.write_text("0 1 2\n")
    with pytest.raises(FileFormatError):
        mnist_load(txt)
