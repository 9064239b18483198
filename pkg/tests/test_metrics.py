import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from goalunlearn.corpus import McqItem
from goalunlearn.metrics import EvalResult, chance_correct, mcq_accuracy, mcq_predictions, metric_report, s_unlearning

GRID = [k / 10 for k in range(11)]


class UniformLM(torch.nn.Module):
    def forward(self, ids):
        return torch.zeros(*ids.shape, 20), None


class LookupLM(torch.nn.Module):
    """Prefers ``answer[prompt[1]]`` after the prompt."""

    def __init__(self, answer):
        super().__init__()
        self.answer = answer

    def forward(self, ids):
        logits = torch.zeros(*ids.shape, 20)
        for b, row in enumerate(ids.tolist()):
            logits[b, -1, self.answer[row[1]]] = 5.0
        return logits, None


def test_chance_correct_examples():
    assert chance_correct(0.25, 0.25) == 0.0
    assert chance_correct(1.0) == 1.0
    assert chance_correct(0.10, 0.25) == 0.0
    with pytest.raises(ValueError):
        chance_correct(0.5, 1.0)


def test_s_unlearning_examples():
    assert s_unlearning(EvalResult(0.0, 1.0, "toxicity")).score == 1.0
    s = s_unlearning(EvalResult(0.25, 0.25, "knowledge"))
    assert (s.u_bar, s.r_bar, s.score) == (1.0, 0.0, 0.0)
    s = s_unlearning(EvalResult(0.2, 0.85, "toxicity"))
    assert s.u_bar == pytest.approx(0.8, abs=1e-15) and s.r_bar == pytest.approx(0.8, abs=1e-15)
    assert s.score == pytest.approx(0.64, abs=1e-15)
    assert s.score == (1 - 0.2) * ((0.85 - 0.25) / 0.75)


def test_knowledge_order_chance_correct_then_invert():
    s = s_unlearning(EvalResult(0.625, 1.0, "knowledge"))
    assert s.u_bar == pytest.approx(0.5)
    assert s_unlearning(EvalResult(0.1, 1.0, "knowledge")).u_bar == 1.0


def test_eval_result_validation():
    with pytest.raises(ValueError):
        EvalResult(1.2, 0.5, "toxicity")
    with pytest.raises(ValueError):
        EvalResult(0.2, 0.5, "style")


@pytest.mark.parametrize("goal", ["toxicity", "knowledge"])
def test_score_zero_at_or_below_chance_utility(goal):
    for U in GRID:
        for R in (0.0, 0.1, 0.2, 0.25):
            assert s_unlearning(EvalResult(U, R, goal)).score == 0.0


@pytest.mark.parametrize("goal", ["toxicity", "knowledge"])
def test_monotone_grid(goal):
    S = np.array([[s_unlearning(EvalResult(U, R, goal)).score for R in GRID] for U in GRID])
    assert np.all(np.diff(S, axis=1) >= 0)  # more utility never hurts
    assert np.all(np.diff(S, axis=0) <= 0)  # more residual U never helps
    assert np.all((S >= 0) & (S <= 1))


@settings(max_examples=300, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.sampled_from(["toxicity", "knowledge"]))
def test_rectangle_area_identity(U, R, goal):
    s = s_unlearning(EvalResult(U, R, goal))
    assert s.score == s.u_bar * s.r_bar
    assert 0 <= s.score <= 1


@settings(max_examples=200, deadline=None)
@given(st.floats(0.25, 1), st.floats(0.25, 1))
def test_chance_correct_order_preserving(a, b):
    if a <= b:
        assert chance_correct(a) <= chance_correct(b)
    assert chance_correct(chance_correct(1.0)) == 1.0
    assert chance_correct(0.0) == 0.0


def test_metric_report_fields():
    rep = metric_report(EvalResult(0.2, 0.85, "toxicity"), 0.25, 100, 3)
    assert rep["s_unlearning"] == pytest.approx(0.64)
    assert rep["n_items"] == 100 and rep["seed"] == 3


def test_uniform_logits_pick_index_zero():
    rng = np.random.default_rng(0)
    items = []
    for _ in range(1000):
        cands = tuple(int(x) for x in rng.choice(np.arange(4, 20), 4, replace=False))
        items.append(McqItem((1, 2, 3), cands, int(rng.integers(4))))
    assert set(mcq_predictions(UniformLM(), items)) == {0}
    acc = mcq_accuracy(UniformLM(), items)
    assert acc == sum(it.correct == 0 for it in items) / 1000
    assert abs(acc - 0.25) <= 0.04


def test_lookup_model_is_perfect_and_batches_by_length():
    answer = {5: 10, 6: 11, 7: 12}
    items = [McqItem((1, 5, 3), (10, 11, 12, 13), 0), McqItem((1, 6, 3, 3), (13, 12, 11, 10), 2),
             McqItem((1, 7, 3), (10, 13, 11, 12), 3)]
    assert mcq_accuracy(LookupLM(answer), items) == 1.0


def test_bad_items_rejected():
    with pytest.raises(ValueError):
        mcq_predictions(UniformLM(), [McqItem((1, 2), (4, 4, 5, 6), 0)])
    with pytest.raises(ValueError):
        mcq_predictions(UniformLM(), [McqItem((1, 2), (4, 5, 6), 0)])
    with pytest.raises(ValueError):
        mcq_predictions(UniformLM(), [])


def test_memorizing_model_accuracy(toy_setup):
    _, c, base = toy_setup
    assert mcq_accuracy(base, c.utility_mcq) > 0.9
    assert mcq_accuracy(base, c.forget_mcq) > 0.9
