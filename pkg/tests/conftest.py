import pytest

from carl import policy, twinsim


@pytest.fixture
def default_config():
    return twinsim.SpacecraftConfig()


@pytest.fixture
def fast_config():
    # 30-step episodes keep rollout-heavy tests quick.
    return twinsim.SpacecraftConfig(episode_horizon=1800.0)


@pytest.fixture
def benign_config():
    # Nothing can fail within the horizon: huge battery, negligible torque.
    return twinsim.SpacecraftConfig(
        battery_capacity=5.0e6,
        disturbance_torque_body=(1e-9, 1e-9, 1e-9),
    )


@pytest.fixture
def random_params():
    return policy.init_params(12345)


@pytest.fixture
def uniform_params():
    return policy.zero_params()


def rollout_states(config, seed, actions):
    """Step the twin through a fixed action sequence; returns visited states."""
    state, _ = twinsim.reset(config, seed)
    states = [state]
    for action in actions:
        state, result = twinsim.step(state, action, config)
        states.append(state)
        if result.terminated or result.truncated:
            break
    return states
