import numpy as np
import pytest
from setups import LINEAR, MLP, cmnist, color_free, example2

from fmi.datagen import EXAMPLE2_ENVIRONMENTS, CmnistParams, Example2Params, LabeledDataset, generate_cmnist_synthetic, generate_example2
from fmi.models import accuracy, evaluate
from fmi.numerics import make_rng
from fmi.training import BatchStream, FmiConfig, train_erm, train_fmi, train_oracle


def fmi_linear(strategy="together", steps=10_000, **kw):
    return FmiConfig(
        strategy, steps=steps, batch_size=0, sub_lr=LINEAR["lr"], main_lr=LINEAR["lr"], momentum=LINEAR["momentum"], **kw
    )


def fmi_mlp(seed=0, steps=5000):
    return FmiConfig(
        "together", steps=steps, batch_size=64, sub_lr=MLP["lr"], main_lr=MLP["lr"],
        momentum=MLP["momentum"], hidden=MLP["hidden"], seed=seed,
    )


def erm_linear(train, rng, steps=10_000):
    return train_erm(train, steps, LINEAR["lr"], (), rng, batch_size=0, momentum=LINEAR["momentum"])


@pytest.fixture(scope="module")
def ex2():
    return example2(make_rng(2024))


@pytest.fixture(scope="module")
def cm():
    return cmnist(make_rng(77))


def test_batch_stream_covers_each_row_once_per_epoch():
    stream = BatchStream(10, 3, make_rng(0))
    seen = np.concatenate([stream.next() for _ in range(3)])
    assert sorted(seen) == sorted(set(seen)) and len(seen) == 9
    assert len(BatchStream(10, 0, make_rng(0)).next()) == 10


def test_config_validation():
    with pytest.raises(ValueError):
        FmiConfig("sometimes")
    with pytest.raises(ValueError):
        FmiConfig(steps=0)
    with pytest.raises(ValueError):
        FmiConfig("warmup_fixed", warm_steps=0)


def test_empty_training_set():
    empty = LabeledDataset(np.zeros((0, 3)), np.zeros(0, int))
    with pytest.raises(ValueError):
        train_erm(empty, 1, 0.1, (), make_rng(0))
    with pytest.raises(ValueError):
        train_fmi(empty, FmiConfig())


def test_same_config_same_trace():
    train = generate_example2(Example2Params(0.95, 0.3), 500, make_rng(1))
    cfg = FmiConfig(steps=300, batch_size=64, threshold=8, seed=5, hidden=(4,))
    a_main, a_sub, a = train_fmi(train, cfg)
    b_main, b_sub, b = train_fmi(train, cfg)
    rows = lambda t: np.array([list(r.values()) for r in t.rows()], float)
    # risks are NaN on steps without an emission
    assert np.array_equal(rows(a), rows(b), equal_nan=True)
    assert all(np.array_equal(x, y) for x, y in zip(a.tables, b.tables))
    for x, y in zip(a_main.arrays() + a_sub.arrays(), b_main.arrays() + b_sub.arrays()):
        assert np.array_equal(x, y)
    c_main, _, _ = train_fmi(train, FmiConfig(steps=300, batch_size=64, threshold=8, seed=6, hidden=(4,)))
    assert not np.array_equal(a_main.classifier.W, c_main.classifier.W)


def test_warmup_freezes_subnetwork():
    train = generate_example2(Example2Params(0.95, 0.3), 400, make_rng(3))
    snaps = []
    cfg = FmiConfig("warmup_fixed", steps=200, warm_steps=50, batch_size=64, threshold=8, seed=1)
    train_fmi(train, cfg, checkpoint_every=50, on_checkpoint=lambda step, main, sub: snaps.append(sub.copy()))
    assert len(snaps) == 4
    for s in snaps[1:]:
        assert np.array_equal(s.classifier.W, snaps[0].classifier.W)


def test_trace_tables_are_uniform(ex2):
    train, _, _ = ex2
    _, _, trace = train_fmi(train, fmi_linear(steps=300, threshold=32, capacity=64))
    assert trace.n_emissions == len(trace.tables) > 0
    for t in trace.tables:
        assert np.all(t == 32)


@pytest.mark.parametrize("strategy, warm", [("together", 0), ("warmup_fixed", 2000)])
def test_fmi_recovers_animal_on_example2(ex2, strategy, warm):
    train, test, _ = ex2
    main, _, trace = train_fmi(train, fmi_linear(strategy, warm_steps=warm, seed=4))
    errors = {name: evaluate(main, ds) for name, ds in test.items()}
    assert max(errors.values()) <= 0.02, errors
    assert trace.n_emissions > 1000


def test_erm_fits_its_training_environment():
    # a background-only rule errs exactly 1 - p = 0.05 of the time, so the
    # bound sits at the mean; estimate the expected error with a large draw
    # and several fits instead of one 1000-row sample (sd ~0.007)
    p, s = EXAMPLE2_ENVIRONMENTS["E0"]
    params = Example2Params(p, s)
    big = generate_example2(params, 200_000, make_rng(99))
    errors = []
    for seed in range(5):
        rng = make_rng(seed)
        errors.append(evaluate(erm_linear(generate_example2(params, 1000, rng), rng), big))
    assert np.mean(errors) <= 0.05


def test_erm_fails_on_shuffled_backgrounds(ex2):
    train, test, _ = ex2
    model = erm_linear(train, make_rng(9))
    assert np.mean([evaluate(model, ds) for ds in test.values()]) >= 0.3


def test_oracle_on_example2(ex2):
    _, test, fresh = ex2
    for name in test:
        model = train_oracle(fresh[name], 10_000, LINEAR["lr"], (), make_rng(10), batch_size=0, momentum=LINEAR["momentum"])
        assert evaluate(model, test[name]) <= 0.01


def test_fmi_reaches_noise_floor_when_background_follows_label():
    train, test, _ = example2(make_rng(11), label_noise=0.1, background_parent="label")
    main, _, _ = train_fmi(train, fmi_linear(seed=12))
    for ds in test.values():
        assert abs(evaluate(main, ds) - 0.10) <= 0.03


def test_noise_on_label_of_animal_tied_background_biases_matching():
    # With the background tied to the clean animal, balancing on the flipped
    # label over-weights animal/background conflicts: in the matched sample a
    # background *against* the label becomes predictive.  The population
    # limit of a linear fit is ~0.17 test error at q = 0.1, not q.
    train, test, _ = example2(make_rng(11), label_noise=0.1, background_parent="animal")
    main, _, _ = train_fmi(train, fmi_linear(seed=12))
    assert np.mean([evaluate(main, ds) for ds in test.values()]) >= 0.15


def test_fmi_and_erm_on_synthetic_cmnist(cm):
    train, test = cm
    main, sub, _ = train_fmi(train, fmi_mlp(seed=1))
    assert accuracy(main, test) >= 0.65
    erm = train_erm(train, 5000, MLP["lr"], MLP["hidden"], make_rng(2), batch_size=64, momentum=MLP["momentum"])
    assert accuracy(erm, test) <= 0.15


def test_oracle_on_color_free_cmnist():
    rng = make_rng(13)
    params = CmnistParams()
    fit = generate_cmnist_synthetic(params, 0.5, 10_000, rng, color_free())
    test = generate_cmnist_synthetic(params, 0.5, 10_000, rng, color_free())
    model = train_oracle(fit, 5000, MLP["lr"], MLP["hidden"], rng, batch_size=64, momentum=MLP["momentum"])
    assert abs(accuracy(model, test) - 0.75) <= 0.02


def test_oracle_uses_color_in_env_09():
    # in env 0.9 the color predicts the label 90% of the time, so ERM on that
    # environment beats the shape-only ceiling of 0.75
    rng = make_rng(14)
    params = CmnistParams()
    fit, test = (generate_cmnist_synthetic(params, 0.9, 10_000, rng) for _ in range(2))
    model = train_oracle(fit, 5000, MLP["lr"], MLP["hidden"], rng, batch_size=64, momentum=MLP["momentum"])
    assert abs(accuracy(model, test) - 0.90) <= 0.02
