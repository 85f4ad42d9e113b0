import json

import numpy as np
import pytest

from fvp.dataset import (
    ContentMismatchError,
    DemoSet,
    ManifestError,
    MissingEpisodeError,
    ShapeMismatchError,
    Trajectory,
    TruncatedDataError,
    build_manifest,
    generate_synthetic,
    load_demoset,
    make_pair,
    read_ply,
    sample_pairs,
    save_demoset,
    synthetic_initial_states,
    valid_targets,
)
from fvp.env import SceneConfig, env_step, is_success

SMALL = SceneConfig(n_points=64)


@pytest.fixture(scope="module")
def corpus():
    return generate_synthetic(SMALL, 6, 7)


def _toy(lengths, n=4):
    trajs = [Trajectory(np.full((L, n, 3), i, np.float32) + np.arange(L, dtype=np.float32)[:, None, None],
                        np.zeros((L, 3), np.float32)) for i, L in enumerate(lengths)]
    return DemoSet(trajs, build_manifest(trajs, None, None))


def test_default_corpus_contract():
    demos = generate_synthetic(SceneConfig(), 50, 7)
    assert len(demos) == 50
    assert all(20 <= len(t) <= 40 for t in demos.trajectories)
    assert demos.manifest["n_trajectories"] == 50
    assert demos.manifest["total_frames"] == sum(len(t) for t in demos.trajectories)
    assert demos.n_points == 256 and demos.action_dim == 3
    for t in demos.trajectories:
        assert t.observations.dtype == np.float32 and np.isfinite(t.observations).all()


def test_same_seed_byte_identical(tmp_path):
    save_demoset(generate_synthetic(SMALL, 3, 11), tmp_path / "a")
    save_demoset(generate_synthetic(SMALL, 3, 11), tmp_path / "b")
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
    assert generate_synthetic(SMALL, 1, 12).trajectories[0].observations.tobytes() != \
        generate_synthetic(SMALL, 1, 11).trajectories[0].observations.tobytes()


def test_open_loop_replay_always_succeeds(corpus):
    starts = synthetic_initial_states(SMALL, 6, 7)
    for start, traj in zip(starts, corpus.trajectories):
        state = start
        for a in traj.actions[:-1]:
            state = env_step(state, a, SMALL)
        assert state.done and is_success(state, SMALL.success_tolerance)


def test_actions_are_effector_displacements(corpus):
    traj = corpus.trajectories[0]
    # the first rows belong to the effector sphere, which moves rigidly
    shift = traj.observations[1:, 0] - traj.observations[:-1, 0]
    np.testing.assert_allclose(shift, traj.actions[:-1], atol=1e-5)


def test_round_trip(tmp_path, corpus):
    save_demoset(corpus, tmp_path)
    back = load_demoset(tmp_path)
    assert len(back) == len(corpus)
    for a, b in zip(corpus.trajectories, back.trajectories):
        np.testing.assert_array_equal(a.observations, b.observations)
        np.testing.assert_array_equal(a.actions, b.actions)
    assert back.manifest["seed"] == 7


class TestLoadErrors:
    @pytest.fixture
    def saved(self, tmp_path, corpus):
        save_demoset(corpus, tmp_path)
        return tmp_path

    def _edit_manifest(self, path, **changes):
        m = json.loads((path / "manifest.json").read_text())
        m.update(changes)
        (path / "manifest.json").write_text(json.dumps(m))
        return m

    def test_wrong_count(self, saved):
        self._edit_manifest(saved, total_frames=3)
        with pytest.raises(ContentMismatchError, match="manifest/content mismatch"):
            load_demoset(saved)

    def test_wrong_episode_length(self, saved):
        m = json.loads((saved / "manifest.json").read_text())
        m["episodes"][1]["frames"] += 1
        (saved / "manifest.json").write_text(json.dumps(m))
        with pytest.raises(ContentMismatchError, match="manifest/content mismatch.*episode_0001"):
            load_demoset(saved)

    def test_missing_episode(self, saved):
        (saved / "episode_0002.bin").unlink()
        with pytest.raises(MissingEpisodeError, match="episode_0002.bin"):
            load_demoset(saved)

    def test_truncated(self, saved):
        f = saved / "episode_0000.bin"
        f.write_bytes(f.read_bytes()[:-10])
        with pytest.raises(TruncatedDataError, match="episode_0000.bin"):
            load_demoset(saved)

    def test_header_shape_mismatch(self, saved):
        self._edit_manifest(saved, n_points=65)
        with pytest.raises(ShapeMismatchError, match="episode_0000.bin"):
            load_demoset(saved)

    def test_malformed_manifest(self, saved):
        (saved / "manifest.json").write_text("{not json")
        with pytest.raises(ManifestError):
            load_demoset(saved)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(ManifestError):
            load_demoset(tmp_path)

    def test_schema_version(self, saved):
        self._edit_manifest(saved, schema_version=99)
        with pytest.raises(ManifestError, match="schema"):
            load_demoset(saved)

    def test_errors_are_value_errors(self):
        assert issubclass(ContentMismatchError, ValueError)


class TestPairs:
    def test_adjacency(self, corpus):
        for p in sample_pairs(corpus, 1, 200, 0):
            traj = corpus.trajectories[p.trajectory]
            np.testing.assert_array_equal(p.history[0], traj.observations[p.frame - 1])
            np.testing.assert_array_equal(p.target, traj.observations[p.frame])

    def test_multi_frame_history_consecutive(self, corpus):
        for p in sample_pairs(corpus, 3, 50, 1):
            traj = corpus.trajectories[p.trajectory]
            np.testing.assert_array_equal(p.history, traj.observations[p.frame - 3: p.frame])
            np.testing.assert_array_equal(p.history_actions, traj.actions[p.frame - 3: p.frame])
            assert p.frame >= 3

    def test_forced_pair(self):
        demos = _toy([2])
        for p in sample_pairs(demos, 1, 5, 0):
            assert (p.trajectory, p.frame) == (0, 1)

    def test_too_long_history(self):
        with pytest.raises(ValueError):
            sample_pairs(_toy([2, 5]), 2, 1, 0)
        with pytest.raises(ValueError):
            valid_targets(_toy([3]), 0)

    def test_uniform_over_pairs(self):
        demos = _toy([3, 5, 4])
        targets = valid_targets(demos, 1)
        assert len(targets) == 2 + 4 + 3
        counts = {t: 0 for t in targets}
        draws = 10_000
        for p in sample_pairs(demos, 1, draws, 5):
            counts[(p.trajectory, p.frame)] += 1
        expected = draws / len(targets)
        sd = np.sqrt(draws * (1 / len(targets)) * (1 - 1 / len(targets)))
        assert all(abs(c - expected) < 3 * sd for c in counts.values())
        # chi-square with 8 degrees of freedom; 26.12 is the 0.999 quantile
        chi2 = sum((c - expected) ** 2 / expected for c in counts.values())
        assert chi2 < 26.12

    def test_deterministic(self, corpus):
        a = [(p.trajectory, p.frame) for p in sample_pairs(corpus, 1, 30, 4)]
        b = [(p.trajectory, p.frame) for p in sample_pairs(corpus, 1, 30, 4)]
        assert a == b

    def test_make_pair(self):
        p = make_pair(_toy([4]), 0, 2, 2)
        assert p.history[:, 0, 0].tolist() == [0.0, 1.0] and p.target[0, 0] == 2.0


def test_ply_round_trip(tmp_path, corpus):
    from fvp.dataset import write_ply

    pts = corpus.trajectories[0].observations[0]
    write_ply(tmp_path / "f.ply", pts)
    text = (tmp_path / "f.ply").read_text()
    assert text.startswith("ply\nformat ascii 1.0\nelement vertex 64\n")
    np.testing.assert_allclose(read_ply(tmp_path / "f.ply"), pts, atol=1e-6)


def test_generator_argument_checked():
    with pytest.raises(ValueError):
        generate_synthetic(SMALL, 0, 0)
