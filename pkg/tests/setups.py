"""Dataset builders shared by the training and acceptance tests."""

from fmi.datagen import (
    EXAMPLE2_ENVIRONMENTS,
    CmnistParams,
    Example2Params,
    concat,
    generate_cmnist_synthetic,
    generate_example2,
    shuffled_background,
)
from fmi.scm import Intervention, SPU

LINEAR = dict(lr=0.1, momentum=0.9, batch_size=0)
MLP = dict(lr=0.01, momentum=0.9, batch_size=64, hidden=(32,))


def example2(rng, n=1000, label_noise=0.0, background_parent="animal", scramble=False):
    """Pooled training data plus one shuffled-background test set per environment.

    Also returns a second, independent test draw per environment for the oracle.
    """
    train, test, oracle = [], {}, {}
    for name, (p, s) in EXAMPLE2_ENVIRONMENTS.items():
        params = Example2Params(p, s, label_noise=label_noise, background_parent=background_parent, scramble=scramble)
        train.append(generate_example2(params, n, rng, env_id=name))
        shuffled = shuffled_background(params)
        test[name] = generate_example2(params, n, rng, shuffled, env_id=name)
        oracle[name] = generate_example2(params, n, rng, shuffled, env_id=name)
    return concat(train, "train"), test, oracle


def color_free():
    """Color bit drawn independently of the label."""
    return Intervention(target=SPU, kind="stochastic", params={"family": "bernoulli_sign", "p": 0.5})


def cmnist(rng, train_envs=(0.1, 0.2), n_train=25_000, n_test=10_000, test_env=0.9):
    params = CmnistParams()
    train = concat([generate_cmnist_synthetic(params, e, n_train, rng) for e in train_envs], "train")
    test = generate_cmnist_synthetic(params, test_env, n_test, rng)
    return train, test
