"""Play-table mechanics, predicates, language plumbing, demonstrator coverage."""

import numpy as np
import pytest

from playdream import env as E


def fresh(seed=0):
    env = E.PlayTable()
    env.reset(seed)
    return env


# -- reset / determinism -----------------------------------------------------


def test_reset_deterministic_and_seed_sensitive():
    a, b, c = fresh(5), fresh(5), fresh(6)
    np.testing.assert_array_equal(a.state.red, b.state.red)
    np.testing.assert_array_equal(a.state.blue, b.state.blue)
    assert a.state.slider == b.state.slider
    assert not np.array_equal(a.state.red, c.state.red) or a.state.slider != c.state.slider


def test_reset_layout_valid():
    for seed in range(20):
        s = fresh(seed).state
        assert np.linalg.norm(s.red - s.blue) > 0.12
        for p in (s.red, s.blue):
            assert E.SPAWN_BOX[0] <= p[0] <= E.SPAWN_BOX[1]
        assert not s.gripper_closed and not s.button_on
        np.testing.assert_array_equal(s.agent, [0.5, 0.5])


def test_step_requires_reset():
    with pytest.raises(RuntimeError):
        E.PlayTable().step(np.zeros(3))


def test_action_validation():
    env = fresh()
    with pytest.raises(ValueError):
        env.step(np.zeros(5))
    env.step([10.0, -10.0, 0.0])  # clipped, not rejected
    assert np.all(env.state.agent >= 0.02) and np.all(env.state.agent <= 0.98)


def test_position_clamped_to_table():
    env = fresh()
    for _ in range(40):
        env.step([1.0, 1.0, -1.0])
    assert env.state.agent[0] <= 0.98 and env.state.agent[1] <= 0.98


# -- gripper / objects -------------------------------------------------------


def drive_to(env, target, grip=-1.0):
    for _ in range(60):
        d = target - env.state.agent
        if np.linalg.norm(d) < 0.02:
            return
        env.step([*np.clip(d / E.STEP_SIZE, -1, 1), grip])


def test_grasp_on_close_over_block():
    env = fresh(1)
    drive_to(env, env.state.red.copy())
    env.step([0, 0, 1.0])
    assert env.state.red_held and not env.state.blue_held


def test_close_away_from_blocks_grabs_nothing():
    env = fresh(1)
    env.step([0, 0, 1.0])  # agent starts at center, blocks are >= grasp radius away
    if min(np.linalg.norm(env.state.agent - env.state.red),
           np.linalg.norm(env.state.agent - env.state.blue)) >= E.GRASP_RADIUS:
        assert not env.state.red_held and not env.state.blue_held


def test_held_block_follows_and_release_drops():
    env = fresh(1)
    drive_to(env, env.state.red.copy())
    env.step([0, 0, 1.0])
    env.step([1.0, 0.5, 1.0])
    np.testing.assert_array_equal(env.state.red, env.state.agent)
    drop = env.state.red.copy()
    env.step([0, 0, -1.0])
    assert not env.state.red_held
    env.step([1.0, 0.0, -1.0])
    np.testing.assert_array_equal(env.state.red, drop)


def test_at_most_one_block_held():
    env = fresh(1)
    drive_to(env, env.state.red.copy())
    env.step([0, 0, 1.0])
    drive_to(env, env.state.blue.copy(), grip=1.0)
    env.step([0, 0, 1.0])  # already closed; no re-grasp
    assert env.state.red_held and not env.state.blue_held


def test_closed_gripper_does_not_grab_in_passing():
    env = fresh(1)
    env.step([0, 0, 1.0])  # close in free space
    drive_to(env, env.state.blue.copy(), grip=1.0)
    assert not env.state.blue_held


# -- button / slider ---------------------------------------------------------


def test_button_toggles_once_per_contact():
    env = fresh(0)
    drive_to(env, E.BUTTON_POS)
    env.step([0, 0, 1.0])
    assert env.state.button_on
    for _ in range(5):  # staying in contact must not re-toggle
        env.step([0, 0, 1.0])
    assert env.state.button_on
    env.step([0, 0, -1.0])
    env.step([0, 0, 1.0])  # re-press toggles off
    assert not env.state.button_on


def test_slider_drags_only_when_gripped_and_empty_handed():
    env = fresh(0)
    start = env.state.slider
    hx = E.slider_handle_x(start)
    drive_to(env, np.array([hx, E.SLIDER_Y]))
    env.step([0, 0, -1.0])
    s0 = env.state.slider
    env.step([1.0, 0, -1.0])  # open gripper: no drag
    assert env.state.slider == s0
    drive_to(env, np.array([E.slider_handle_x(env.state.slider), E.SLIDER_Y]))
    env.step([0, 0, 1.0])
    for _ in range(4):
        env.step([1.0, 0, 1.0])
    assert env.state.slider > s0


# -- predicates --------------------------------------------------------------


def test_lift_predicates():
    env = fresh(1)
    before = env.state.copy()
    drive_to(env, env.state.red.copy())
    env.step([0, 0, 1.0])
    assert E.evaluate_success("lift_red", before, env.state)
    assert not E.evaluate_success("lift_blue", before, env.state)
    # stays satisfied while held
    env.step([0.5, 0.5, 1.0])
    assert E.evaluate_success("lift_red", before, env.state)
    # release ends it
    env.step([0, 0, -1.0])
    assert not E.evaluate_success("lift_red", before, env.state)


def test_place_in_zone_predicate():
    env = fresh(1)
    before = env.state.copy()
    drive_to(env, env.state.red.copy())
    env.step([0, 0, 1.0])
    drive_to(env, np.array([0.15, 0.15]), grip=1.0)
    assert not E.evaluate_success("place_in_zone", before, env.state)  # still held
    env.step([0, 0, -1.0])
    assert E.evaluate_success("place_in_zone", before, env.state)


def test_button_and_slider_predicates():
    env = fresh(0)
    before = env.state.copy()
    drive_to(env, E.BUTTON_POS)
    env.step([0, 0, 1.0])
    assert E.evaluate_success("press_button", before, env.state)

    env2 = fresh(0)
    before2 = env2.state.copy()
    drive_to(env2, np.array([E.slider_handle_x(env2.state.slider), E.SLIDER_Y]))
    env2.step([0, 0, 1.0])
    drive_to(env2, np.array([E.slider_handle_x(0.95), E.SLIDER_Y]), grip=1.0)
    assert E.evaluate_success("open_slider", before2, env2.state)
    assert not E.evaluate_success("close_slider", before2, env2.state)


def test_unknown_task_rejected():
    env = fresh(0)
    with pytest.raises(ValueError):
        E.evaluate_success("fly_to_moon", env.state, env.state)


# -- language ----------------------------------------------------------------


def test_vocab_size_and_paraphrases():
    assert 20 <= len(E.VOCAB) <= 45
    for task in E.TASKS:
        assert len(E.TEMPLATES[task]) >= 3
        for text in E.TEMPLATES[task]:
            toks = E.tokenize(text)
            assert toks.shape == (E.MAX_TOKENS,)
            # round trip through the vocab
            words = [E.VOCAB[i] for i in toks if i != 0]
            assert " ".join(words) == text


def test_distinct_tasks_get_distinct_token_sets():
    reds = {tuple(E.tokenize(t)) for t in E.TEMPLATES["lift_red"]}
    blues = {tuple(E.tokenize(t)) for t in E.TEMPLATES["lift_blue"]}
    assert not reds & blues


def test_sample_instruction_deterministic():
    a = E.sample_instruction("press_button", np.random.default_rng(3))
    b = E.sample_instruction("press_button", np.random.default_rng(3))
    assert a.text == b.text and a.task == "press_button"


# -- rendering ---------------------------------------------------------------


def test_observation_shapes_and_ranges():
    obs = fresh(2).observe()
    assert obs.static.shape == (16, 16, 3) and obs.static.dtype == np.float32
    assert obs.ego.shape == (8, 8, 3)
    assert np.all(obs.static >= 0) and np.all(obs.static <= 1)
    assert obs.proprio.shape == (3,) and obs.proprio[2] == 0.0


def test_ego_crop_clamps_at_borders():
    env = fresh(2)
    for _ in range(30):
        env.step([-1.0, -1.0, -1.0])
    obs = env.observe()
    assert obs.ego.shape == (8, 8, 3)  # clamped, not truncated


def test_render_shows_gripper_state():
    env = fresh(2)
    open_img = env.observe().static
    env.step([0, 0, 1.0])
    closed_img = env.observe().static
    assert not np.array_equal(open_img, closed_img)


# -- scripted demonstrator ---------------------------------------------------


def test_player_covers_all_tasks_in_long_play():
    env = fresh(11)
    player = E.ScriptedPlayer(env, np.random.default_rng(11), noise=0.3)
    for _ in range(5000):
        env.step(player.act())
        player.observe_step()
    counts = np.zeros(len(E.TASKS), dtype=int)
    for _, task in player.events:
        counts[task] += 1
    assert np.all(counts >= 5), f"task completion counts {counts}"


def test_oracle_player_completes_each_task_quickly():
    for task in E.TASKS:
        env = fresh(4)
        player = E.ScriptedPlayer(env, np.random.default_rng(0), noise=0.0,
                                  fixed_task=task)
        start = env.state.copy()
        done_at = None
        for t in range(64):
            env.step(player.act())
            player.observe_step()
            if E.evaluate_success(task, start, env.state):
                done_at = t
                break
        assert done_at is not None, f"oracle failed {task}"
