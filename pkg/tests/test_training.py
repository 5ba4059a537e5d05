import numpy as np
import pytest

from treegan.core_math import Tensor, grad, grad_check, matmul
from treegan.critic import Critic, CriticConfig
from treegan.training import (
    Checkpoint,
    CheckpointError,
    NumericError,
    TrainConfig,
    Trainer,
    checkpoint_bytes,
    critic_loss,
    generator_loss,
    gradient_penalty,
    load_checkpoint,
    parse_checkpoint,
    read_telemetry,
    save_checkpoint,
    train,
)
from treegan.treegcn import ConfigError, Generator, GeneratorConfig

GEN = dict(degrees=[1, 2, 4], feature_dims=[8, 6, 4, 3], support=4, latent_dim=8)
CRIT = CriticConfig([3, 8, 8], [8, 4, 1])


def toy_data(n=12, points=8, seed=0):
    return np.random.default_rng(seed).standard_normal((n, points, 3)) * 0.5


def trainer(seed=0, precision="float64", **kw):
    cfg = TrainConfig(batch_size=4, critic_steps=2, seed=seed, precision=precision, **kw)
    return Trainer(toy_data(), GeneratorConfig(**GEN), CRIT, cfg)


class Linear:
    """D(x) = scale * <w, flatten(x)> for a unit vector w."""

    def __init__(self, w, scale=1.0):
        self.w = Tensor(w.reshape(-1, 1) * scale)

    def __call__(self, x):
        x = x if isinstance(x, Tensor) else Tensor(x)
        return matmul(x.reshape(x.shape[0], -1), self.w).reshape(x.shape[0])


def unit(n, seed=0):
    w = np.random.default_rng(seed).standard_normal(n)
    return w / np.linalg.norm(w)


# ---------------------------------------------------------------- losses

def test_generator_loss_constant_critic():
    D = lambda x: Tensor(np.full(x.shape[0], 2.5))  # noqa: E731
    G = lambda z: Tensor(np.zeros((len(z), 4, 3)))  # noqa: E731
    assert generator_loss(np.zeros((3, 2)), G, D).item() == -2.5


def test_generator_loss_batch_of_one():
    G = Generator(GeneratorConfig(**GEN), 0)
    D = Critic(CRIT, 0)
    z = np.random.default_rng(0).standard_normal((1, 8))
    assert generator_loss(z, G, D).item() == -D(G(z)).item()


def test_penalty_zero_for_unit_linear_critic(rng):
    real, fake = rng.standard_normal((3, 5, 3)), rng.standard_normal((3, 5, 3))
    pen = gradient_penalty(real, fake, Linear(unit(15)), 10.0, rng=rng)
    assert abs(pen.item()) < 1e-24


def test_penalty_constant_critic_is_lambda(rng):
    real, fake = rng.standard_normal((3, 5, 3)), rng.standard_normal((3, 5, 3))
    D = lambda x: x.sum() * 0.0 + Tensor(np.ones(x.shape[0]))  # noqa: E731
    assert gradient_penalty(real, fake, D, 10.0, rng=rng).item() == 10.0


def test_penalty_doubled_linear_critic(rng):
    real, fake = rng.standard_normal((3, 5, 3)), rng.standard_normal((3, 5, 3))
    pen = gradient_penalty(real, fake, Linear(unit(15), 2.0), 10.0, rng=rng)
    assert pen.item() == pytest.approx(10.0, abs=1e-12)


def test_penalty_norm_per_cloud_over_all_coordinates(rng):
    # gradient of D = sum_b c_b <w, x_b> has norm |c_b| per cloud
    w = unit(6)
    c = np.array([0.5, 3.0])

    def D(x):
        flat = x.reshape(2, 6)
        return matmul(flat, Tensor(w.reshape(6, 1))).reshape(2) * Tensor(c)

    real, fake = rng.standard_normal((2, 2, 3)), rng.standard_normal((2, 2, 3))
    pen = gradient_penalty(real, fake, D, 1.0, u=np.array([0.3, 0.9]))
    assert pen.item() == pytest.approx(np.mean((c - 1.0) ** 2), rel=1e-12)


def test_penalty_grad_check_wrt_critic(rng):
    D = Critic(CriticConfig([3, 5, 4], [4, 3, 1]), 2)
    real, fake = rng.standard_normal((2, 6, 3)), rng.standard_normal((2, 6, 3))
    u = rng.uniform(size=2)
    assert grad_check(lambda: gradient_penalty(real, fake, D, 10.0, u=u), D.parameters()) < 1e-4


def test_penalty_shape_mismatch(rng):
    with pytest.raises(ValueError):
        gradient_penalty(np.zeros((2, 4, 3)), np.zeros((2, 5, 3)), Linear(unit(12)), 10.0)


def test_critic_loss_zero_critic_no_penalty():
    D = lambda x: (x if isinstance(x, Tensor) else Tensor(x)).sum() * 0.0 + Tensor(np.zeros(x.shape[0]))  # noqa: E731
    loss, terms = critic_loss(np.ones((2, 4, 3)), np.zeros((2, 8)), lambda z: Tensor(np.zeros((2, 4, 3))), D, 0.0)
    assert loss.item() == 0.0 and terms["penalty"] == 0.0


def test_critic_loss_identical_batches(rng):
    real = rng.standard_normal((3, 4, 3))
    D = Critic(CRIT, 1)
    loss, _ = critic_loss(real, np.zeros((3, 8)), lambda z: Tensor(real.copy()), D, 0.0)
    assert loss.item() == 0.0


def test_critic_loss_gives_no_generator_grad(rng):
    G = Generator(GeneratorConfig(**GEN), 0)
    D = Critic(CRIT, 0)
    loss, _ = critic_loss(rng.standard_normal((2, 8, 3)), rng.standard_normal((2, 8)), G, D, 10.0, rng=rng)
    assert all(g is None for g in grad(loss, G.parameters()))


# ---------------------------------------------------------------- training loop

def test_zero_steps_checkpoint_equals_init():
    t = trainer()
    init = {p.name: p.data.copy() for p in t.gen_params + t.critic_params}
    t.run(0)
    ck = t.checkpoint()
    for k, v in init.items():
        np.testing.assert_array_equal(ck.tensors[k], v)
    assert ck.meta["step"] == 0


def test_telemetry_identical_across_reruns(tmp_path):
    cfg = TrainConfig(batch_size=4, critic_steps=2, total_gen_steps=3, precision="float64")
    a = train(toy_data(), GeneratorConfig(**GEN), CRIT, cfg, telemetry_path=tmp_path / "a.csv")
    b = train(toy_data(), GeneratorConfig(**GEN), CRIT, cfg, telemetry_path=tmp_path / "b.csv")
    ra, rb = read_telemetry(tmp_path / "a.csv"), read_telemetry(tmp_path / "b.csv")
    assert len(ra) == 3
    for x, y in zip(ra, rb):
        x.pop("wall_time"), y.pop("wall_time")
        assert x == y
    for p, q in zip(a.gen_params, b.gen_params):
        np.testing.assert_array_equal(p.data, q.data)


def test_resume_matches_straight_run():
    straight = trainer()
    straight.run(4)
    first = trainer()
    first.run(2)
    blob = checkpoint_bytes(first.checkpoint())
    resumed = Trainer.from_checkpoint(parse_checkpoint(blob), toy_data())
    assert resumed.step == 2
    resumed.run(2)
    for p, q in zip(straight.gen_params + straight.critic_params, resumed.gen_params + resumed.critic_params):
        np.testing.assert_array_equal(p.data, q.data)


def test_training_changes_parameters():
    t = trainer()
    before = [p.data.copy() for p in t.gen_params]
    t.run(1)
    assert any(not np.array_equal(b, p.data) for b, p in zip(before, t.gen_params))


def test_float32_mode_keeps_dtype():
    t = trainer(precision="float32")
    t.run(1)
    assert all(p.dtype == np.float32 for p in t.gen_params + t.critic_params)


def test_nan_raises_numeric_error():
    t = trainer()
    t.critic_params[0].data[:] = np.nan
    with pytest.raises(NumericError):
        t.train_step()


def test_point_count_mismatch_is_config_error():
    with pytest.raises(ConfigError):
        Trainer(toy_data(points=6), GeneratorConfig(**GEN), CRIT, TrainConfig(batch_size=4))


@pytest.mark.parametrize("kw", [dict(lambda_gp=-1), dict(critic_steps=0), dict(precision="float16")])
def test_train_config_validation(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


# ---------------------------------------------------------------- checkpoint file

def test_checkpoint_roundtrip_bytes(tmp_path):
    t = trainer()
    t.run(1)
    save_checkpoint(tmp_path / "a.tgn", t.checkpoint())
    ck = load_checkpoint(tmp_path / "a.tgn")
    save_checkpoint(tmp_path / "b.tgn", ck)
    assert (tmp_path / "a.tgn").read_bytes() == (tmp_path / "b.tgn").read_bytes()
    for p in t.gen_params:
        np.testing.assert_array_equal(ck.tensors[p.name], p.data)
    G = ck.generator()
    z = np.random.default_rng(0).standard_normal((1, 8))
    np.testing.assert_array_equal(G(z).data, t.G(z).data)


def test_truncated_checkpoint_fails_checksum(tmp_path):
    save_checkpoint(tmp_path / "a.tgn", trainer().checkpoint())
    blob = (tmp_path / "a.tgn").read_bytes()
    (tmp_path / "t.tgn").write_bytes(blob[:-10])
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(tmp_path / "t.tgn")


def test_flipped_byte_fails_checksum(tmp_path):
    save_checkpoint(tmp_path / "a.tgn", trainer().checkpoint())
    blob = bytearray((tmp_path / "a.tgn").read_bytes())
    blob[100] ^= 0xFF
    (tmp_path / "c.tgn").write_bytes(bytes(blob))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "c.tgn")


def test_bad_magic(tmp_path):
    (tmp_path / "x.tgn").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "x.tgn")


def test_checkpoint_dtype_codes(tmp_path):
    ck = Checkpoint({"a": np.arange(3, dtype=np.int64), "b": np.ones((2, 2), np.float32),
                     "c": np.array(1.5)}, {"k": 1})
    save_checkpoint(tmp_path / "d.tgn", ck)
    back = load_checkpoint(tmp_path / "d.tgn")
    for k, v in ck.tensors.items():
        assert back.tensors[k].dtype == v.dtype
        np.testing.assert_array_equal(back.tensors[k], v)
    with pytest.raises(CheckpointError):
        checkpoint_bytes(Checkpoint({"bad": np.ones(2, np.complex64)}, {}))
