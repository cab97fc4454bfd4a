import json

import numpy as np
import pytest

from gsworld import (
    Pose,
    PrefixSample,
    QaRecord,
    TrajectoryClip,
    build_trajectory_qa,
    emit_qa_record,
    filter_scenes_by_psnr,
    format_pose_text,
    normalize_clip_to_frame,
    parse_pose_text,
    parse_qa_record,
    prefix_lm_loss,
)
from gsworld.dataset import TRAJECTORY_PROMPT_TEMPLATE, extract_pose_text, format_number, round_half_away
from gsworld.errors import FormatError, ValidationError
from gsworld.geometry import quaternion_to_matrix

from conftest import rand_quat

# reference record reproduced character-for-character
QA_LISTING = """{
  "token": "fd8420396768425eabec9bdddf7e64b6",
  "scene_token": "e7ef871f77f44331aefdebc24ec034b7",
  "scene_idx": 2,
  "frame_idx": 0,
  "category": "2D_perception_infos",
  "task": "rdp",
  "conversations": [
    {
      "from": "human",
      "value": "based on <gauss>, Can you quantify the distance separating the <CAM_FRONT> <box>(14,219),(37,248)</box> from the ego car?"
    },
    {
      "from": "gpt",
      "value": "38.7 meters is the distance from the ego car to it"
    }
  ],
  "image": [
    "nuscenes/samples/CAM_FRONT/n015-2018-08-02-17-16-37+0800__CAM_FRONT__1533201470412460.jpg"
  ],
  "views": ["CAM_FRONT"],
  "gauss": [
    "gauss/output-full-6v/2_CAM_FRONT/langsplat_3/per_frame/00000.pth"
  ]
}"""

TRAJ_HUMAN_POSES = (
    "[PT, [-7.45, 3.05, 0.16, 0.0, 0.0, -0.36, 0.93], "
    "[-5.75, 1.97, 0.11, 0.0, 0.0, -0.28, 0.96], "
    "[-4.04, 0.92, 0.09, 0.0, 0.0, -0.19, 0.98], "
    "[-2.15, 0.26, 0.04, 0.0, 0.0, -0.1, 1.0]]"
)
TRAJ_GPT_POSES = (
    "[PT, [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0], "
    "[2.47, 0.65, -0.06, 0.0, 0.0, 0.09, 1.0], "
    "[4.24, 2.32, -0.11, 0.0, 0.0, 0.12, 0.99], "
    "[5.5, 4.08, -0.15, 0.0, 0.0, 0.13, 0.99], "
    "[7.03, 6.45, -0.15, 0.0, 0.0, 0.13, 0.99], "
    "[8.66, 8.91, -0.17, -0.01, 0.0, 0.13, 0.99]]"
)
TRAJ_HUMAN_VALUE = (
    "There is last 4 frames trajectory, " + TRAJ_HUMAN_POSES
    + ". Summarize the motion of the ego vehicle in this 6-frame clip"
)


def rand_clip(seed):
    rng = np.random.default_rng(seed)
    poses = tuple(Pose(translation=rng.normal(size=3) * 4, rotation=rand_quat(rng)) for _ in range(10))
    return TrajectoryClip(poses=poses, times=tuple(0.5 * i for i in range(10)))


class TestNumberFormat:
    @pytest.mark.parametrize(
        "value,expected",
        [
            (0.0, "0.0"),
            (1.0, "1.0"),
            (-0.1, "-0.1"),
            (5.5, "5.5"),
            (0.09, "0.09"),
            (-0.36, "-0.36"),
            (-0.005, "-0.01"),
            (0.005, "0.01"),
            (-0.0001, "0.0"),
            (12.345, "12.35"),
            (-7.45, "-7.45"),
        ],
    )
    def test_examples(self, value, expected):
        assert format_number(value) == expected

    def test_half_away_from_zero(self):
        assert round_half_away(0.125) == 0.13
        assert round_half_away(-0.125) == -0.13


class TestPoseText:
    def test_identity_pose(self):
        assert format_pose_text([Pose()]) == "[PT, [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]]"

    def test_listing_strings_round_trip_byte_identically(self):
        for text in (TRAJ_HUMAN_POSES, TRAJ_GPT_POSES):
            assert format_pose_text(parse_pose_text(text)) == text

    def test_listing_first_translation(self):
        poses = parse_pose_text(TRAJ_HUMAN_POSES)
        assert len(poses) == 4
        assert np.allclose(poses[0].translation, [-7.45, 3.05, 0.16], atol=1e-12)

    def test_format_parse_inverse_at_declared_precision(self):
        rng = np.random.default_rng(0)
        for seed in range(20):
            poses = [Pose(translation=rng.normal(size=3) * 5, rotation=rand_quat(rng)) for _ in range(4)]
            back = parse_pose_text(format_pose_text(poses))
            for a, b in zip(poses, back):
                assert np.abs(a.translation - b.translation).max() <= 0.005 + 1e-12
                # rotations rounded to 2 decimals then renormalized
                assert np.abs(a.rotation - b.rotation).max() <= 0.02

    def test_malformed_text(self):
        with pytest.raises(FormatError):
            parse_pose_text("[-7.45, 3.05]")
        with pytest.raises(FormatError):
            parse_pose_text("[PT, [1, 2, 3]]")

    def test_extract_from_prose(self):
        assert extract_pose_text(TRAJ_HUMAN_VALUE) == TRAJ_HUMAN_POSES
        with pytest.raises(FormatError):
            extract_pose_text("no poses here")


class TestQaRecords:
    def test_listing_reserializes_byte_identically(self):
        record = parse_qa_record(QA_LISTING)
        assert emit_qa_record(record) == QA_LISTING

    def test_missing_gauss_marker_rejected(self):
        record = parse_qa_record(QA_LISTING)
        record.conversations[0]["value"] = "Can you quantify the distance?"
        with pytest.raises(ValidationError):
            emit_qa_record(record)

    def test_alternation_enforced(self):
        record = parse_qa_record(QA_LISTING)
        record.conversations.insert(1, {"from": "human", "value": "again?"})
        with pytest.raises(ValidationError):
            emit_qa_record(record)

    def test_malformed_json_is_format_error(self):
        with pytest.raises(FormatError):
            parse_qa_record("{not json")

    def test_schema_violation_is_validation_error(self):
        data = json.loads(QA_LISTING)
        del data["task"]
        with pytest.raises(ValidationError):
            parse_qa_record(json.dumps(data))
        data = json.loads(QA_LISTING)
        data["unexpected"] = 1
        with pytest.raises(ValidationError):
            parse_qa_record(json.dumps(data))

    def test_round_trip_random_records(self):
        rng = np.random.default_rng(1)
        for i in range(10):
            n_turns = int(rng.integers(1, 4)) * 2
            conversations = []
            for turn in range(n_turns):
                who = "human" if turn % 2 == 0 else "gpt"
                text = f"turn {turn} with unicode é and \"quotes\""
                if turn == 0:
                    text = "based on <gauss>, " + text
                conversations.append({"from": who, "value": text})
            record = QaRecord(
                token=f"tok{i}",
                scene_token=f"scene{i}",
                scene_idx=int(rng.integers(100)),
                frame_idx=int(rng.integers(100)),
                category="cat",
                task="rdp",
                conversations=conversations,
                image=[f"img/{j}.jpg" for j in range(int(rng.integers(0, 3)))],
                views=["CAM_FRONT", "CAM_BACK"][: int(rng.integers(1, 3))],
                gauss=[f"gauss/{i}.pth"],
            )
            text = emit_qa_record(record)
            again = parse_qa_record(text)
            assert emit_qa_record(again) == text
            assert again == record


class TestTrajectoryQa:
    def test_already_normalized_clip_unchanged(self):
        rng = np.random.default_rng(2)
        poses = [Pose(translation=rng.normal(size=3), rotation=rand_quat(rng)) for _ in range(10)]
        poses[4] = Pose()  # anchor already the identity
        clip = TrajectoryClip(poses=tuple(poses), times=tuple(range(10)))
        rel = normalize_clip_to_frame(clip)
        for a, b in zip(rel.poses, clip.poses):
            assert np.abs(a.translation - b.translation).max() < 1e-12
            assert min(np.abs(a.rotation - b.rotation).max(), np.abs(a.rotation + b.rotation).max()) < 1e-12

    def test_target_starts_with_identity_pose(self):
        prompt, target = build_trajectory_qa(rand_clip(3))
        assert target.startswith("[PT, [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]")
        assert prompt.startswith("There is last 4 frames trajectory, [PT, ")
        assert prompt.endswith("Summarize the motion of the ego vehicle in this 6-frame clip")

    def test_prompt_template_matches_listing(self):
        assert TRAJECTORY_PROMPT_TEMPLATE.format(poses=TRAJ_HUMAN_POSES) == TRAJ_HUMAN_VALUE

    def test_relative_poses_match_matrix_oracle(self):
        # oracle: 4x4 homogeneous matrix algebra
        clip = rand_clip(4)
        rel = normalize_clip_to_frame(clip)

        def mat(pose):
            m = np.eye(4)
            m[:3, :3] = quaternion_to_matrix(pose.rotation)
            m[:3, 3] = pose.translation
            return m

        anchor_inv = np.linalg.inv(mat(clip.poses[4]))
        for i in range(10):
            expected = anchor_inv @ mat(clip.poses[i])
            got = mat(rel.poses[i])
            assert np.abs(expected - got).max() < 1e-9

    def test_normalization_idempotent(self):
        clip = rand_clip(5)
        once = normalize_clip_to_frame(clip)
        twice = normalize_clip_to_frame(once)
        for a, b in zip(once.poses, twice.poses):
            assert np.abs(a.translation - b.translation).max() < 1e-12
            assert min(np.abs(a.rotation - b.rotation).max(), np.abs(a.rotation + b.rotation).max()) < 1e-12
        # and at the serialized level
        assert build_trajectory_qa(clip) == build_trajectory_qa(once)

    def test_clip_must_have_ten_frames(self):
        rng = np.random.default_rng(6)
        poses = tuple(Pose(translation=rng.normal(size=3)) for _ in range(9))
        with pytest.raises(ValidationError):
            TrajectoryClip(poses=poses, times=tuple(range(9)))

    def test_times_strictly_increasing(self):
        poses = tuple(Pose() for _ in range(10))
        with pytest.raises(ValidationError):
            TrajectoryClip(poses=poses, times=(0,) * 10)


class TestPrefixLmLoss:
    def test_certain_predictions_cost_nothing(self):
        s = PrefixSample(prefix_ids=(1, 2, 3), gt_ids=(4, 5), gt_probs=np.array([1.0, 1.0]))
        assert prefix_lm_loss([s]) == 0.0

    def test_uniform_tables_give_n_log_v(self):
        v, n = 50, 7
        s = PrefixSample(prefix_ids=(0,), gt_ids=tuple(range(n)), gt_probs=np.full(n, 1.0 / v))
        assert abs(prefix_lm_loss([s]) - n * np.log(v)) < 1e-12

    def test_matches_direct_sum_oracle(self):
        rng = np.random.default_rng(7)
        batch = []
        expected = 0.0
        for _ in range(5):
            n = int(rng.integers(1, 6))
            probs = rng.uniform(0.05, 1.0, n)
            batch.append(PrefixSample(prefix_ids=(1,), gt_ids=tuple(range(n)), gt_probs=probs))
            expected -= float(np.log(probs).sum())
        assert abs(prefix_lm_loss(batch) - expected) < 1e-12

    def test_invalid_probabilities(self):
        with pytest.raises(ValidationError):
            PrefixSample(prefix_ids=(), gt_ids=(1,), gt_probs=np.array([0.0]))
        with pytest.raises(ValidationError):
            PrefixSample(prefix_ids=(), gt_ids=(1,), gt_probs=np.array([1.2]))
        with pytest.raises(ValidationError):
            PrefixSample(prefix_ids=(), gt_ids=(1, 2), gt_probs=np.array([0.5]))

    def test_non_negative_and_zero_iff_certain(self):
        rng = np.random.default_rng(8)
        probs = rng.uniform(0.01, 0.999, 6)
        s = PrefixSample(prefix_ids=(), gt_ids=tuple(range(6)), gt_probs=probs)
        assert prefix_lm_loss([s]) > 0.0


class TestPsnrFilter:
    def test_identical_pairs_kept(self):
        img = np.random.default_rng(9).uniform(0, 1, (8, 8, 3))
        kept = filter_scenes_by_psnr({"a": [(img, img)]}, threshold_db=99.0)
        assert kept == ["a"]

    def test_twenty_db_scene_dropped_at_25(self):
        kept = filter_scenes_by_psnr(
            {"a": [(np.zeros((4, 4)), np.full((4, 4), 0.1))]}, threshold_db=25.0
        )
        assert kept == []

    def test_mixed_scene_matches_per_view_oracle(self):
        from gsworld import psnr

        rng = np.random.default_rng(10)
        views = [(rng.uniform(0, 1, (6, 6)), rng.uniform(0, 1, (6, 6))) for _ in range(3)]
        mean_db = float(np.mean([psnr(a, b) for a, b in views]))
        assert filter_scenes_by_psnr({"s": views}, threshold_db=mean_db - 1e-9) == ["s"]
        assert filter_scenes_by_psnr({"s": views}, threshold_db=mean_db + 1e-9) == []

    def test_no_views_is_an_error(self):
        with pytest.raises(ValidationError):
            filter_scenes_by_psnr({"empty": []}, threshold_db=25.0)
