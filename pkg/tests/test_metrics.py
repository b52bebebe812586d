import json
import random

import pytest

from oracles import brute_force_best_matching, plain_enumeration_best

from drs import metrics
from drs.assignment import max_weight_assignment
from drs.metrics import (
    EvalReport,
    MalformedJudgeReply,
    Prediction,
    SceneGraphScore,
    UnknownQuestionId,
    aggregate,
    extract_letters,
    reasoning_validity,
    render_report,
    scene_graph_f1,
    score_choice,
    score_open_ended,
    triplet_similarity,
)
from drs.provider import mock_provider
from drs.schema import (
    STAGE_ORDER,
    DatasetSample,
    QType,
    QuestionRecord,
    StagedStep,
    StructuredAnnotation,
    Triplet,
)


WORDS = ["red", "blue", "car", "tree", "left", "box", "lamp", "big", "mat", "pole"]


def random_triplets(rng, n):
    def phrase():
        return " ".join(rng.sample(WORDS, rng.randint(1, 2)))

    return [Triplet(phrase(), rng.choice(["on", "near", "left of"]), phrase()) for _ in range(n)]


class TestAssignment:
    def test_known_small_case(self):
        pairs = max_weight_assignment([[1.0, 2.0], [2.0, 3.0]])
        assert len(pairs) == 2
        total = sum([[1.0, 2.0], [2.0, 3.0]][i][j] for i, j in pairs)
        assert total == pytest.approx(4.0)

    def test_rectangular_and_zero_weights(self):
        pairs = max_weight_assignment([[0.0, 5.0, 0.0]])
        assert pairs == [(0, 1)]

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            max_weight_assignment([[-1.0]])

    def test_memoized_oracle_agrees_with_plain_enumeration(self):
        rng = random.Random(5)
        for _ in range(40):
            n, m = rng.randint(0, 4), rng.randint(1, 4)
            sims = [[rng.random() for _ in range(m)] for _ in range(n)]
            for tau in (0.3, 0.6):
                assert brute_force_best_matching(
                    tuple(map(tuple, sims)), tau
                ) == pytest.approx(plain_enumeration_best(sims, tau))


class TestSceneGraphF1:
    def test_identical_graphs_score_one(self):
        triplets = random_triplets(random.Random(0), 3)
        score = scene_graph_f1(triplets, list(triplets))
        assert score.f1 == 1.0 and score.matched == 3

    def test_disjoint_graphs_score_zero(self):
        pred = [Triplet("aa", "bb", "cc")]
        gold = [Triplet("xx", "yy", "zz")]
        assert scene_graph_f1(pred, gold).f1 == 0.0

    def test_both_empty_is_vacuously_perfect(self):
        score = scene_graph_f1([], [])
        assert (score.precision, score.recall, score.f1) == (1.0, 1.0, 1.0)

    def test_one_side_empty_is_zero(self):
        gold = random_triplets(random.Random(1), 2)
        assert scene_graph_f1([], gold).f1 == 0.0
        assert scene_graph_f1(gold, []).f1 == 0.0

    def test_symmetry_swaps_precision_recall(self):
        rng = random.Random(2)
        for _ in range(25):
            pred = random_triplets(rng, rng.randint(1, 5))
            gold = random_triplets(rng, rng.randint(1, 5))
            forward = scene_graph_f1(pred, gold)
            backward = scene_graph_f1(gold, pred)
            assert forward.precision == pytest.approx(backward.recall)
            assert forward.recall == pytest.approx(backward.precision)
            assert forward.f1 == pytest.approx(backward.f1)

    def test_invariant_under_permutation(self):
        rng = random.Random(3)
        pred = random_triplets(rng, 4)
        gold = random_triplets(rng, 4)
        baseline = scene_graph_f1(pred, gold)
        for _ in range(5):
            rng.shuffle(pred)
            rng.shuffle(gold)
            shuffled = scene_graph_f1(pred, gold)
            assert shuffled == baseline

    def test_matches_brute_force(self):
        rng = random.Random(4)
        for _ in range(60):
            pred = random_triplets(rng, rng.randint(0, 5))
            gold = random_triplets(rng, rng.randint(0, 5))
            for tau in (0.3, 0.5, 0.8):
                score = scene_graph_f1(pred, gold, tau)
                if not pred or not gold:
                    continue
                sims = tuple(
                    tuple(triplet_similarity(p, g) for g in gold) for p in pred
                )
                count, best_sim = brute_force_best_matching(sims, tau)
                assert score.matched == count
                assert score.total_similarity == pytest.approx(best_sim, abs=1e-9)

    def test_f1_is_one_only_for_total_cover(self):
        pred = random_triplets(random.Random(6), 3)
        assert scene_graph_f1(pred, pred[:2]).f1 < 1.0

    def test_tau_bounds(self):
        with pytest.raises(metrics.MetricsError):
            scene_graph_f1([], [], tau=0.0)

    def test_slot_similarity_is_dice_over_words(self):
        a = Triplet("big red car", "on", "road")
        b = Triplet("red car", "on", "road")
        # head dice = 2*2/(3+2), relation 1, tail 1
        assert triplet_similarity(a, b) == pytest.approx((0.8 + 1 + 1) / 3)


class TestScoreChoice:
    def test_multi_select_normalization(self):
        assert score_choice("c , a", "A,C", QType.MULTI_SELECT) is True

    def test_plain_mismatch(self):
        assert score_choice("B", "A", QType.SINGLE_CHOICE) is False

    def test_letter_extraction_from_free_text(self):
        assert score_choice("A. 1 car", "A", QType.SINGLE_CHOICE) is True
        assert score_choice("B) two cars", "A", QType.SINGLE_CHOICE) is False

    def test_unparsable_scores_false(self):
        assert extract_letters("no idea", QType.SINGLE_CHOICE) is None
        assert score_choice("no idea", "A", QType.SINGLE_CHOICE) is False

    def test_single_choice_rejects_letter_lists(self):
        assert extract_letters("A,B", QType.SINGLE_CHOICE) is None


def scripted_judge(script):
    return mock_provider(script)


class TestScoreOpenEnded:
    def test_byte_equal_short_circuits_without_judge_call(self):
        judge = scripted_judge([])  # any call would raise UnscriptedRequest
        assert score_open_ended("q", "white", "white", judge) is True
        assert judge.call_log == []

    def test_scripted_true(self):
        judge = scripted_judge([(None, ['{"similar": true}'])])
        assert score_open_ended("q", "white", "The towel is white.", judge) is True

    def test_scripted_false(self):
        judge = scripted_judge([(None, ['{"similar": false}'])])
        assert score_open_ended("q", "white", "blue", judge) is False

    def test_malformed_after_retry(self):
        judge = scripted_judge([(None, ["yes", "yes"])])
        with pytest.raises(MalformedJudgeReply):
            score_open_ended("q", "white", "blue", judge)


def chain(conclusion="the answer is A"):
    return tuple(
        StagedStep(stage, text)
        for stage, text in zip(STAGE_ORDER, ("see", "relate", "infer", conclusion))
    )


class TestReasoningValidity:
    def test_letter_containment_short_circuits(self):
        judge = scripted_judge([])
        assert reasoning_validity(chain(), "A", judge) is True
        assert judge.call_log == []

    def test_empty_chain_false_without_judge(self):
        judge = scripted_judge([])
        assert reasoning_validity((), "A", judge) is False
        assert judge.call_log == []

    def test_scripted_false(self):
        judge = scripted_judge([(None, ['{"entails": false}'])])
        assert reasoning_validity(chain("hence blue"), "white", judge) is False

    def test_scripted_true(self):
        judge = scripted_judge([(None, ['{"entails": true}'])])
        assert reasoning_validity(chain("hence white"), "white", judge) is True


def make_sample(qid, qtype, answer, category="Perception", annotation=None):
    options = None if qtype == "open_ended" else {"A": "one", "B": "two"}
    record = QuestionRecord.from_dict(
        {
            "id": qid,
            "source": "hypersim",
            "category": category,
            "qtype": qtype,
            "question": f"question {qid}?",
            "options": options,
            "answer": answer,
            "image_ref": "img.png",
        }
    )
    return DatasetSample(record, annotation)


class TestAggregate:
    def test_weighted_combined_accuracy(self):
        samples = [
            make_sample("q1", "single_choice", "A"),
            make_sample("q2", "single_choice", "A"),
            make_sample("q3", "open_ended", "white"),
            make_sample("q4", "open_ended", "blue"),
        ]
        preds = [
            Prediction("q1", "A"),
            Prediction("q2", "B"),  # wrong -> mcq acc 0.5
            Prediction("q3", "white"),
            Prediction("q4", "blue"),  # byte-equal -> oe acc 1.0
        ]
        report = aggregate(preds, samples, judge=scripted_judge([]))
        assert report.mcq_letter_acc == 0.5
        assert report.open_ended_acc == 1.0
        assert report.combined_acc == 0.75
        recomputed = (2 * report.mcq_letter_acc + 2 * report.open_ended_acc) / 4
        assert report.combined_acc == recomputed

    def test_all_correct_fixture(self):
        ann = StructuredAnnotation(
            ("car",), (Triplet("car", "on", "road"),), chain("the answer is A"), "A"
        )
        ann_white = StructuredAnnotation(
            ("towel",), (Triplet("towel", "on", "rack"),), chain("it is white"), "white"
        )
        samples = [
            make_sample("q1", "single_choice", "A", annotation=ann),
            make_sample("q2", "open_ended", "white", category="AnomalyDetection", annotation=ann_white),
        ]
        preds = [
            Prediction("q1", "A", structured=ann),
            Prediction("q2", "white", structured=ann_white),
        ]
        report = aggregate(preds, samples, judge=scripted_judge([(None, ['{"entails": true}'])]))
        assert report.mcq_letter_acc == 1.0
        assert report.open_ended_acc == 1.0
        assert report.combined_acc == 1.0
        assert report.scene_graph_f1 == 1.0
        assert report.reasoning_validity == 1.0
        assert report.per_category["Perception"] == 1.0
        assert report.per_category["AnomalyDetection"] == 1.0

    def test_unknown_question_id(self):
        with pytest.raises(UnknownQuestionId):
            aggregate([Prediction("ghost", "A")], [], judge=None)

    def test_unparsable_letters_flagged(self):
        samples = [make_sample("q1", "single_choice", "A")]
        report = aggregate([Prediction("q1", "dunno")], samples, judge=None)
        assert report.mcq_letter_acc == 0.0
        assert any("unparsable" in reason for _, reason in report.flagged)

    def test_counts_by_qtype(self):
        samples = [
            make_sample("q1", "single_choice", "A"),
            make_sample("q2", "multi_select", "A,B"),
            make_sample("q3", "open_ended", "x"),
        ]
        preds = [Prediction("q1", "A"), Prediction("q2", "A,B"), Prediction("q3", "x")]
        report = aggregate(preds, samples, judge=None)
        assert report.counts == {"single_choice": 1, "multi_select": 1, "open_ended": 1}

    def test_render_layout(self):
        report = EvalReport(
            per_category={c.value: 0.5 for c in metrics.Category},
            mcq_letter_acc=0.511,
            open_ended_acc=0.714,
            combined_acc=0.626,
            scene_graph_f1=0.4,
            reasoning_validity=0.6,
            counts={},
        )
        text = render_report(report, name="tuned-3b")
        for column in ("MCQ-L", "OE", "Comb.", "Percept.", "Spatial", "Afford.", "Anomaly", "FPR."):
            assert column in text
        assert "51.1" in text and "71.4" in text and "62.6" in text

    def test_report_round_trips_to_json(self):
        samples = [make_sample("q1", "single_choice", "A")]
        report = aggregate([Prediction("q1", "A")], samples, judge=None)
        assert json.loads(json.dumps(report.to_dict()))["combined_acc"] == 1.0


class TestPredictionFile:
    def test_load_predictions(self, tmp_path):
        rows = [
            {"question_id": "q1", "raw_answer": "A"},
            {
                "question_id": "q2",
                "raw_answer": "white",
                "structured": {
                    "key_objects": ["towel"],
                    "scene_graph": ["towel --on--> rack"],
                    "reasoning_chain": [
                        "[Perception]: see",
                        "[Relation]: near",
                        "[Logic]: thus",
                        "[Conclusion]: white",
                    ],
                    "answer": "white",
                },
            },
        ]
        path = tmp_path / "preds.jsonl"
        path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
        preds = metrics.load_predictions(path)
        assert preds[0].structured is None
        assert preds[1].structured is not None
        assert preds[1].structured.answer == "white"

    def test_unparsable_structured_block_is_dropped(self):
        pred = Prediction.from_dict(
            {"question_id": "q", "raw_answer": "A", "structured": {"key_objects": []}}
        )
        assert pred.structured is None
