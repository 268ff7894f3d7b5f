import json
import re

import numpy as np
import pytest

from langskill.corpus import LengthPolicy, Trajectory, validate_segmentation
from langskill.gridworld import ACTION_NAMES, sample_task, scripted_expert, subgoal_texts
from langskill.segmenter import (
    ConfigurationError,
    LLMClient,
    LLMConfig,
    ParseError,
    VocabError,
    build_prompt,
    estimate_tokens,
    llm_segment,
    oracle_segment,
    parse_response,
    segment_corpus,
    uniform_segment,
)


def make_traj(actions, goal="tidy the room"):
    actions = np.asarray(actions, dtype=np.int64)
    obs = np.zeros((len(actions), 7, 7, 3), dtype=np.int64)
    return Trajectory(goal_text=goal, observations=obs, actions=actions)


# -- prompt construction -------------------------------------------------------


def test_prompt_contains_bound_sentence():
    traj = make_traj([0, 1, 2])
    prompt = build_prompt(traj, ACTION_NAMES, len_bounds=(1, 5))
    assert (
        "The number of actions assigned to each skill should not exceed 5 "
        "but should be larger than 1." in prompt
    )


def test_prompt_contains_goal_and_ordered_actions():
    traj = make_traj([2, 0, 2, 5], goal="open the grey box")
    prompt = build_prompt(traj, ACTION_NAMES)
    assert "open the grey box" in prompt
    joined = ", ".join(ACTION_NAMES[a] for a in [2, 0, 2, 5])
    assert joined in prompt


def test_prompt_ignores_observations():
    actions = [1, 2, 2, 3]
    a = make_traj(actions)
    b = make_traj(actions)
    b.observations = b.observations + 3  # totally different pixels
    assert build_prompt(a, ACTION_NAMES) == build_prompt(b, ACTION_NAMES)


def test_prompt_token_estimate_under_budget_for_long_trajectories():
    rng = np.random.default_rng(0)
    traj = make_traj(rng.integers(0, 6, size=400))
    prompt = build_prompt(traj, ACTION_NAMES)
    assert estimate_tokens(prompt) < 8000


def test_prompt_carries_retry_feedback():
    traj = make_traj([0, 1])
    prompt = build_prompt(traj, ACTION_NAMES, feedback="segment 1 has length 9")
    assert "segment 1 has length 9" in prompt


# -- response parsing ----------------------------------------------------------

HOUSEHOLD_VOCAB = [
    "LookDown15",
    "MoveAhead300",
    "RotateRight90",
    "MoveAhead100",
    "PickupObject ButterKnife",
    "SliceObject Apple",
    "LookUp15",
    "RotateLeft180",
    "MoveAhead25",
    "RotateLeft90",
    "PutObject DiningTable",
    "PickupObject Apple",
    "MoveAhead150",
    "MoveAhead250",
    "MoveAhead75",
    "OpenObject Microwave",
    "PutObject Microwave",
    "CloseObject Microwave",
    "ToggleObjectOn Microwave",
    "ToggleObjectOff Microwave",
    "PutObject SideTable",
]

# a recorded assistant transcript in the loose brace style some models emit
HOUSEHOLD_RESPONSE = """Action alignment:
[
    {
        index: 0,
        summary action str: navigate to kitchen step 1,
        robot actions str: LookDown 15, MoveAhead300
    },
    {
        index: 1,
        summary action str: navigate to kitchen step 2,
        robot actions str: RotateRight90, MoveAhead100, LookDown15
    },
    {
        index: 2,
        summary action str: "pick up butterknife and slice apple",
        robot actions str: "PickupObject ButterKnife, SliceObject Apple"
    },
    {
        index: 3,
        summary action str: "return butterknife to table",
        robot actions str: "LookUp15, RotateLeft180, MoveAhead25, RotateRight90, LookDown15, PutObject DiningTable"
    },
    {
        index: 4,
        summary action str: "pick up apple slice",
        robot actions str: "LookUp15, RotateRight90, MoveAhead25, LookDown15, PickupObject Apple"
    },
    {
        index: 5,
        summary action str: "navigate to microwave step 1",
        robot actions str: "LookUp15, RotateRight90, MoveAhead25, RotateRight90, MoveAhead150"
    },
    {
        index: 6,
        summary action str: "navigate to microwave step 2",
        robot actions str: "RotateLeft90, MoveAhead250, RotateRight90, MoveAhead75"
    },
    {
        index: 7,
        summary action str: "navigate to microwave step 3",
        robot actions str: "RotateLeft90, MoveAhead25"
    },
    {
        index: 8,
        summary action str: "place apple slice in microwave and turn on",
        robot actions str: "OpenObject Microwave, PutObject Microwave, CloseObject Microwave, ToggleObjectOn Microwave, ToggleObjectOff Microwave"
    },
    {
        index: 9,
        summary action str: "retrieve microwaved apple slice",
        robot actions str: "OpenObject Microwave, PickupObject Apple, CloseObject Microwave"
    },
    {
        index: 10,
        summary action str: "navigate to black table step 1",
        robot actions str: "RotateLeft90, MoveAhead100, RotateLeft90, MoveAhead300"
    },
    {
        index: 11,
        summary action str: "navigate to black table step 2",
        robot actions str: "RotateRight90, MoveAhead75"
    },
    {
        index: 12,
        summary action str: "place microwaved apple slice on black table",
        robot actions str: "PutObject SideTable"
    }
],
"""


def test_parse_household_transcript():
    seg, ids = parse_response(HOUSEHOLD_RESPONSE, HOUSEHOLD_VOCAB)
    assert len(seg.segments) == 13
    assert len(ids[0]) == 2  # "LookDown 15, MoveAhead300"
    assert ids[0] == [HOUSEHOLD_VOCAB.index("LookDown15"), HOUSEHOLD_VOCAB.index("MoveAhead300")]
    assert seg.segments[0].annotation == "navigate to kitchen step 1"
    assert seg.segments[-1].annotation == "place microwaved apple slice on black table"
    total = sum(len(g) for g in ids)
    assert total == 44
    assert seg.segments[-1].end == 43


def test_parse_strict_json():
    text = json.dumps(
        [
            {"index": 0, "summary_action_str": "walk", "robot_actions_str": "move forward, move forward"},
            {"index": 1, "summary_action_str": "grab", "robot_actions_str": "pick up"},
        ]
    )
    seg, ids = parse_response(text, ACTION_NAMES)
    assert [s.annotation for s in seg.segments] == ["walk", "grab"]
    assert ids == [[2, 2], [3]]


def test_parse_empty_response():
    with pytest.raises(ParseError):
        parse_response("", ACTION_NAMES)
    with pytest.raises(ParseError):
        parse_response("I cannot help with that.", ACTION_NAMES)


def test_parse_unknown_action():
    text = '[{"index":0,"summary_action_str":"x","robot_actions_str":"levitate"}]'
    with pytest.raises(VocabError):
        parse_response(text, ACTION_NAMES)


def test_reordered_segments_surfaced_by_validator():
    traj = make_traj([0, 0, 2, 2])
    good = (
        '[{"index":0,"summary_action_str":"turn","robot_actions_str":"turn left, turn left"},'
        '{"index":1,"summary_action_str":"walk","robot_actions_str":"move forward, move forward"}]'
    )
    seg, ids = parse_response(good, ACTION_NAMES)
    assert validate_segmentation(traj, seg, segment_actions=ids) is None
    swapped = (
        '[{"index":1,"summary_action_str":"walk","robot_actions_str":"move forward, move forward"},'
        '{"index":0,"summary_action_str":"turn","robot_actions_str":"turn left, turn left"}]'
    )
    seg2, ids2 = parse_response(swapped, ACTION_NAMES)
    msg = validate_segmentation(traj, seg2, segment_actions=ids2)
    assert msg is not None and "disagree" in msg


# -- deterministic backends ----------------------------------------------------


def test_oracle_segment_greedy_chunking():
    traj = make_traj([2] * 12, goal="go somewhere far")
    out = oracle_segment(traj, [12], ["go somewhere far"])
    seg = out.recover_segmentation()
    spans = [(s.start, s.end) for s in seg.segments]
    assert spans == [(0, 4), (5, 9), (10, 11)]


def test_oracle_segment_exact_span():
    traj = make_traj([2] * 5)
    out = oracle_segment(traj, [5], ["walk over"])
    assert int(out.beta_bar.sum()) == 1
    assert out.annotations[0] == "walk over step 1"


def test_oracle_segment_annotation_pattern():
    task = sample_task("two-subgoal", 11)
    traj, bounds = scripted_expert(task)
    out = oracle_segment(traj, bounds, subgoal_texts(task))
    pattern = re.compile(r"^(go to|pick up|drop|open) the \w+ \w+ step \d+$")
    assert all(pattern.match(a) for a in out.annotations)
    assert out.annotations[0].endswith("step 1")


def test_oracle_segment_boundary_mismatch():
    traj = make_traj([2] * 6)
    with pytest.raises(ValueError):
        oracle_segment(traj, [4], ["a"])  # does not reach T
    with pytest.raises(ValueError):
        oracle_segment(traj, [3, 6], ["a"])  # text count mismatch


def test_uniform_segment_covers():
    traj = make_traj([1] * 13)
    out = uniform_segment(traj)
    seg = out.recover_segmentation()
    assert all(len(s) <= 5 for s in seg.segments)
    assert validate_segmentation(traj, seg) is None
    assert out.provenance == "uniform"


# -- llm backend ----------------------------------------------------------------


def scripted_response_for(traj, max_len=4):
    """A well-formed response built from the trajectory itself."""
    items = []
    t = traj.length
    start = 0
    i = 0
    while start < t:
        end = min(start + max_len, t)
        names = ", ".join(ACTION_NAMES[a] for a in traj.actions[start:end].tolist())
        items.append(
            {"index": i, "summary_action_str": f"phase {i}", "robot_actions_str": names}
        )
        start = end
        i += 1
    return json.dumps(items)


def test_llm_segment_happy_path(tmp_path):
    traj = make_traj([0, 2, 2, 2, 3, 1, 2, 5])
    calls = []

    def transport(prompt):
        calls.append(prompt)
        return scripted_response_for(traj)

    client = LLMClient(LLMConfig(transport=transport, cache_dir=tmp_path / "cache"))
    out = llm_segment(traj, ACTION_NAMES, client)
    assert out.provenance.startswith("llm:")
    assert out.base == traj
    assert len(calls) == 1


def test_llm_cache_hit_means_zero_network_calls(tmp_path):
    traj = make_traj([0, 2, 2, 2, 3, 1])

    def transport(prompt):
        return scripted_response_for(traj)

    cfg = LLMConfig(transport=transport, cache_dir=tmp_path / "cache")
    first = LLMClient(cfg)
    out1 = llm_segment(traj, ACTION_NAMES, first)
    assert first.network_calls == 1

    def dead_transport(prompt):
        raise AssertionError("network touched despite cache")

    second = LLMClient(LLMConfig(transport=dead_transport, cache_dir=tmp_path / "cache"))
    out2 = llm_segment(traj, ACTION_NAMES, second)
    assert second.network_calls == 0
    assert out1 == out2


def test_llm_retry_after_invalid_response(tmp_path):
    traj = make_traj([0, 2, 2, 2, 3, 1])
    responses = [
        '[{"index":0,"summary_action_str":"bad","robot_actions_str":"turn left"}]',  # cover gap
        scripted_response_for(traj),
    ]
    calls = []

    def transport(prompt):
        calls.append(prompt)
        return responses[len(calls) - 1]

    client = LLMClient(LLMConfig(transport=transport, cache_dir=tmp_path / "cache"))
    out = llm_segment(traj, ACTION_NAMES, client)
    assert len(calls) == 2
    assert "attempts=2" in out.provenance
    assert "rejected" in calls[1]  # the violation was fed back


def test_llm_fallback_uniform(tmp_path):
    traj = make_traj([0, 2, 2, 2, 3, 1, 0])

    def transport(prompt):
        return "gibberish with no segments"

    client = LLMClient(
        LLMConfig(transport=transport, cache_dir=tmp_path / "cache", max_retries=2)
    )
    out = llm_segment(traj, ACTION_NAMES, client)
    assert out.provenance.startswith("fallback:uniform")
    seg = out.recover_segmentation()
    assert all(len(s) <= 5 for s in seg.segments)


def test_llm_fallback_oracle(tmp_path):
    task = sample_task("single-subgoal", 3)
    traj, bounds = scripted_expert(task)

    def transport(prompt):
        return "no dice"

    client = LLMClient(LLMConfig(transport=transport, cache_dir=tmp_path / "cache"))
    out = llm_segment(
        traj,
        ACTION_NAMES,
        client,
        subgoal_boundaries=bounds,
        subgoal_texts=subgoal_texts(task),
    )
    assert out.provenance.startswith("fallback:oracle")


def test_client_requires_endpoint_configuration(monkeypatch):
    monkeypatch.delenv("LAST_LLM_BASE_URL", raising=False)
    monkeypatch.delenv("LAST_LLM_API_KEY", raising=False)
    with pytest.raises(ConfigurationError):
        LLMClient(LLMConfig())
    monkeypatch.setenv("LAST_LLM_BASE_URL", "http://localhost:1")
    with pytest.raises(ConfigurationError, match="LAST_LLM_API_KEY"):
        LLMClient(LLMConfig())


def test_every_backend_produces_valid_enrichment(tmp_path):
    tasks = [sample_task("two-subgoal", s) for s in range(6)]
    pairs = [scripted_expert(t) for t in tasks]
    trajs = [p[0] for p in pairs]
    bounds = [p[1] for p in pairs]
    texts = [subgoal_texts(t) for t in tasks]

    def transport(prompt):
        goal_line = [l for l in prompt.splitlines() if l.startswith("Goal: ")][-1]
        for tr in trajs:
            if tr.goal_text == goal_line[len("Goal: ") :]:
                return scripted_response_for(tr)
        raise AssertionError("unknown goal in prompt")

    client = LLMClient(LLMConfig(transport=transport, cache_dir=tmp_path / "cache"))
    for backend, kwargs in (
        ("oracle", {"boundaries": bounds, "texts": texts}),
        ("uniform", {}),
        ("llm", {"client": client}),
    ):
        outs = segment_corpus(trajs, backend, ACTION_NAMES, **kwargs)
        assert len(outs) == len(trajs)
        for out, traj in zip(outs, trajs):
            seg = out.recover_segmentation()
            assert validate_segmentation(traj, seg, LengthPolicy(1, 5)) is None
            assert out.beta_bar[0] == 1
