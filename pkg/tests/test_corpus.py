import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from langskill.corpus import (
    CorpusFormatError,
    EnrichedTrajectory,
    LatentAssignment,
    LengthPolicy,
    Segment,
    Segmentation,
    Trajectory,
    corpus_hash,
    enrich,
    load_corpus,
    respects_never_split,
    save_corpus,
    validate_segmentation,
)


def make_traj(t, goal="do the thing", seed=0):
    rng = np.random.default_rng(seed)
    obs = rng.integers(0, 5, size=(t, 7, 7, 3))
    actions = rng.integers(0, 6, size=t)
    return Trajectory(goal_text=goal, observations=obs, actions=actions)


def test_trajectory_invariants():
    with pytest.raises(ValueError):
        Trajectory("g", np.zeros((0, 7, 7, 3)), np.zeros(0, dtype=int))
    with pytest.raises(ValueError):
        Trajectory("g", np.zeros((3, 7, 7, 3)), np.zeros(2, dtype=int))


def test_enrich_single_segment():
    traj = make_traj(6)
    seg = Segmentation([Segment(0, 5, "all of it")])
    out = enrich(traj, seg)
    assert out.beta_bar.tolist() == [1, 0, 0, 0, 0, 0]
    assert out.annotations == ["all of it"] * 6


def test_enrich_singletons():
    traj = make_traj(4)
    seg = Segmentation([Segment(i, i, f"s{i}") for i in range(4)])
    out = enrich(traj, seg)
    assert out.beta_bar.tolist() == [1, 1, 1, 1]


def test_enrich_thirteen_segments_over_44_actions():
    # mirrors a 44-action episode carved into 13 annotated pieces
    lengths = [2, 3, 2, 6, 5, 5, 4, 2, 5, 3, 4, 2, 1]
    assert sum(lengths) == 44 and len(lengths) == 13
    traj = make_traj(44)
    segments, start = [], 0
    for i, n in enumerate(lengths):
        segments.append(Segment(start, start + n - 1, f"piece {i}"))
        start += n
    out = enrich(traj, Segmentation(segments))
    assert int(out.beta_bar.sum()) == 13
    assert out.recover_segmentation().boundaries() == [s.start for s in segments]


def test_enrich_rejects_invalid():
    traj = make_traj(5)
    with pytest.raises(ValueError):
        enrich(traj, Segmentation([Segment(0, 2, "a"), Segment(4, 4, "b")]))


def test_validate_ok():
    traj = make_traj(5)
    seg = Segmentation([Segment(0, 2, "a"), Segment(3, 4, "b")])
    assert validate_segmentation(traj, seg) is None


def test_validate_overlap():
    traj = make_traj(5)
    seg = Segmentation([Segment(0, 2, "a"), Segment(2, 4, "b")])
    msg = validate_segmentation(traj, seg)
    assert msg is not None and "overlap" in msg


def test_validate_length_violation():
    traj = make_traj(8)
    seg = Segmentation([Segment(0, 5, "a"), Segment(6, 7, "b")])
    msg = validate_segmentation(traj, seg, LengthPolicy(1, 5))
    assert msg is not None and "length" in msg
    assert validate_segmentation(traj, seg, LengthPolicy(1, 6)) is None


def test_validate_gap_and_short_cover():
    traj = make_traj(6)
    assert "gap" in validate_segmentation(
        traj, Segmentation([Segment(0, 1, "a"), Segment(3, 5, "b")])
    )
    assert "cover" in validate_segmentation(traj, Segmentation([Segment(0, 3, "a")]))


def test_validate_segment_actions_mismatch():
    traj = make_traj(4)
    seg = Segmentation([Segment(0, 1, "a"), Segment(2, 3, "b")])
    right = [traj.actions[:2].tolist(), traj.actions[2:].tolist()]
    assert validate_segmentation(traj, seg, segment_actions=right) is None
    wrong = [right[1], right[0]]
    if right[0] != right[1]:
        msg = validate_segmentation(traj, seg, segment_actions=wrong)
        assert msg is not None and "disagree" in msg


def test_enriched_invariants():
    traj = make_traj(3)
    with pytest.raises(ValueError):
        EnrichedTrajectory(traj, np.array([0, 1, 0]), ["a", "a", "a"])
    with pytest.raises(ValueError):
        EnrichedTrajectory(traj, np.array([1, 0, 0]), ["a", "b", "b"])
    ok = EnrichedTrajectory(traj, np.array([1, 0, 1]), ["a", "a", "b"])
    assert ok.length == 3


def test_latent_assignment_invariants():
    LatentAssignment(np.array([1, 0, 1]), np.array([2, 2, 0]))
    with pytest.raises(ValueError):
        LatentAssignment(np.array([0, 1]), np.array([0, 1]))
    with pytest.raises(ValueError):
        LatentAssignment(np.array([1, 0]), np.array([0, 1]))


def test_respects_never_split():
    a = LatentAssignment(np.array([1, 0, 0, 1]), np.array([0, 0, 0, 1]))
    assert respects_never_split(np.array([1, 0, 1, 1]), a)
    b = LatentAssignment(np.array([1, 0, 1, 1]), np.array([0, 0, 1, 0]))
    assert not respects_never_split(np.array([1, 0, 0, 1]), b)


def test_roundtrip_empty(tmp_path):
    path = tmp_path / "empty.jsonl"
    save_corpus([], path)
    assert load_corpus(path) == []


def test_roundtrip_plain_and_enriched(tmp_path):
    trajs = [make_traj(t, goal=f"goal {t}", seed=t) for t in (1, 3, 7)]
    enriched = [
        enrich(tr, Segmentation([Segment(0, tr.length - 1, "whole")])) for tr in trajs
    ]
    p1, p2 = tmp_path / "plain.jsonl", tmp_path / "rich.jsonl"
    save_corpus(trajs, p1)
    save_corpus(enriched, p2)
    assert load_corpus(p1) == trajs
    assert load_corpus(p2) == enriched


def test_roundtrip_hash_stable(tmp_path):
    trajs = [make_traj(5, seed=i) for i in range(100)]
    path = tmp_path / "c.jsonl"
    save_corpus(trajs, path)
    loaded = load_corpus(path)
    assert corpus_hash(loaded) == corpus_hash(trajs)
    save_corpus(loaded, tmp_path / "c2.jsonl")
    assert (tmp_path / "c.jsonl").read_bytes() == (tmp_path / "c2.jsonl").read_bytes()


def test_unknown_field_rejected(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text(
        '{"goal":"g","observations":[[[0]]],"actions":[1],"surprise":true}\n',
        encoding="utf-8",
    )
    with pytest.raises(CorpusFormatError, match="line 1"):
        load_corpus(path)


def test_malformed_line_numbered(tmp_path):
    path = tmp_path / "bad.jsonl"
    good = '{"goal":"g","observations":[[[0]]],"actions":[1]}\n'
    path.write_text(good + "{not json}\n", encoding="utf-8")
    with pytest.raises(CorpusFormatError, match="line 2"):
        load_corpus(path)


@st.composite
def segmentations(draw):
    lengths = draw(st.lists(st.integers(1, 5), min_size=1, max_size=12))
    segs, start = [], 0
    for i, n in enumerate(lengths):
        segs.append(Segment(start, start + n - 1, f"s{i}"))
        start += n
    return Segmentation(segs), start


@settings(max_examples=60, deadline=None)
@given(segmentations(), st.integers(0, 2**31 - 1))
def test_property_segments_tile_actions(seg_and_t, seed):
    seg, t = seg_and_t
    traj = make_traj(t, seed=seed)
    assert validate_segmentation(traj, seg) is None
    concat = [a for s in seg.segments for a in traj.actions[s.start : s.end + 1].tolist()]
    assert concat == traj.actions.tolist()


@settings(max_examples=60, deadline=None)
@given(segmentations(), st.integers(0, 2**31 - 1))
def test_property_enrich_recover_roundtrip(seg_and_t, seed):
    seg, t = seg_and_t
    traj = make_traj(t, seed=seed)
    rec = enrich(traj, seg).recover_segmentation()
    assert [(s.start, s.end) for s in rec.segments] == [
        (s.start, s.end) for s in seg.segments
    ]
