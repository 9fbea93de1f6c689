import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from calteacher.calibration import CalibrationQueue, CalibrationSample, CalibratorParams
from calteacher.dataset import Annotation, Category, Dataset, Image, load_dataset
from calteacher.geometry import BBox, iou
from calteacher.pseudo_labeling import (
    ConfigError,
    Detection,
    Label,
    PipelineConfig,
    PipelineState,
    ScheduleConfig,
    dynamic_threshold,
    match_max_iou,
    queue_capacity_for,
    refit,
    step,
    step_batch,
    step_fixed_threshold,
    write_labels_json,
)

CFG = PipelineConfig()
GT = [Annotation(1, 1, 1, BBox(0, 0, 10, 10))]


def fresh(cfg=CFG, **kw):
    state = PipelineState.fresh(cfg)
    for k, v in kw.items():
        setattr(state, k, v)
    return state


def test_match_max_iou_examples():
    det = Detection(1, 0.9, BBox(0, 0, 10, 10))
    assert match_max_iou(det, GT) == 1.0
    assert match_max_iou(det, [Annotation(1, 1, 2, BBox(0, 0, 10, 10))]) == 0.0
    gts = [Annotation(1, 1, 1, BBox(0, 0, 10, 15)), Annotation(2, 1, 1, BBox(20, 20, 30, 30))]
    assert match_max_iou(det, gts) == pytest.approx(100 / 150)


def test_hand_traced_step():
    dets = [
        Detection(1, 0.9, BBox(0, 0, 10, 10)),
        Detection(1, 0.8, BBox(20, 20, 30, 30)),
        Detection(1, 0.5, BBox(40, 40, 50, 50)),
        Detection(1, 0.9, BBox(0, 0, 10, 15)),
    ]
    labels, state = step(dets, GT, fresh(), CFG)
    assert labels[0] == Label(1, GT[0].box)
    assert labels[1:] == [Label(1, BBox(20, 20, 30, 30), pseudo=True, score=pytest.approx(0.8))]
    assert [(s.p_hat, s.m) for s in state.queue] == [(0.9, 1), (0.9, 0)]
    assert state.iteration == 1


def test_no_detections():
    labels, state = step([], GT, fresh(), CFG)
    assert labels == [Label(1, GT[0].box)]
    assert len(state.queue) == 0 and state.iteration == 1 and state.params == CalibratorParams.identity()


def test_below_raw_floor_ignored():
    dets = [Detection(1, 0.3, BBox(0, 0, 10, 10)), Detection(1, 0.3, BBox(50, 50, 60, 60))]
    labels, state = step(dets, GT, fresh(params=CalibratorParams(1, 5)), CFG)
    assert len(labels) == 1 and len(state.queue) == 0


def test_iou_exactly_tau_minus_takes_neither_branch():
    # IoU 0.6 exactly: width 6 box inside the 10x10 gt
    det = Detection(1, 0.95, BBox(0, 0, 6, 10))
    assert iou(det.box, GT[0].box) == 0.6
    labels, state = step([det], GT, fresh(), CFG)
    assert len(labels) == 1 and len(state.queue) == 0


def test_other_class_overlap_is_a_candidate():
    det = Detection(2, 0.95, BBox(0, 0, 10, 10))
    labels, state = step([det], GT, fresh(), CFG)
    assert labels[-1].pseudo and len(state.queue) == 0


def test_refit_on_schedule():
    cfg = PipelineConfig(refit_interval=3)
    samples = [CalibrationSample(p, int(p > 0.5)) for p in (0.2, 0.3, 0.45, 0.55, 0.7, 0.9)]
    samples += [CalibrationSample(0.35, 1), CalibrationSample(0.8, 0)]
    state = fresh(cfg, queue=CalibrationQueue(100, samples))
    for t in range(1, 7):
        _, state = step([], GT, state, cfg)
        assert len(state.refits) == t // 3
    assert state.params != CalibratorParams.identity()
    assert [r.iteration for r in state.refits] == [3, 6]


def test_degenerate_queue_keeps_params():
    cfg = PipelineConfig(refit_interval=1)
    old = CalibratorParams(0.5, 0.2)
    state = fresh(cfg, params=old, queue=CalibrationQueue(10, [CalibrationSample(0.9, 1)] * 5))
    _, state = step([], GT, state, cfg)
    assert state.params == old and state.fit_failures == 1 and not state.refits


def test_batch_uses_one_calibrator_and_one_iteration():
    cfg = PipelineConfig(refit_interval=1)
    samples = [CalibrationSample(p, int(p > 0.5)) for p in (0.2, 0.3, 0.45, 0.55, 0.7, 0.9, 0.35)]
    samples.append(CalibrationSample(0.8, 0))
    state = fresh(cfg, queue=CalibrationQueue(100, samples))
    det = Detection(1, 0.9, BBox(50, 50, 60, 60))
    out, state = step_batch([([det], GT), ([det], GT)], state, cfg)
    assert state.iteration == 1 and len(state.refits) == 1
    assert out[0] == out[1] and out[0][-1].score == pytest.approx(0.9)


def test_config_validation():
    with pytest.raises(ConfigError):
        PipelineConfig(tau_minus=0.8, tau_plus=0.7)
    with pytest.raises(ConfigError):
        PipelineConfig(tau_s=1.0)
    with pytest.raises(ConfigError):
        PipelineConfig(refit_interval=0)
    with pytest.raises(ConfigError):
        Detection(1, 1.0, BBox(0, 0, 1, 1))
    assert queue_capacity_for(8000, 1.0) == 8000


@pytest.mark.parametrize(
    "e, want",
    [(1, 0.5), (10, 1.0), (5, 0.5 + 0.5 * math.log(5) / math.log(10)), (0, 0.5), (-3, 0.5)],
)
def test_dynamic_threshold_examples(e, want):
    assert dynamic_threshold(e, ScheduleConfig(0.5, 0, 10)) == pytest.approx(want, rel=1e-15)


def test_dynamic_threshold_errors():
    with pytest.raises(ConfigError):
        ScheduleConfig(0.5, 3, 4)
    with pytest.raises(ConfigError):
        dynamic_threshold(11, ScheduleConfig(0.5, 0, 10))


@settings(max_examples=200, deadline=None)
@given(tau0=st.floats(0.01, 0.99), e_minus=st.integers(0, 100), span=st.integers(2, 500))
def test_dynamic_threshold_non_decreasing(tau0, e_minus, span):
    s = ScheduleConfig(tau0, e_minus, e_minus + span)
    values = [dynamic_threshold(e, s) for e in range(e_minus, e_minus + span + 1)]
    assert all(x <= y for x, y in zip(values, values[1:]))
    assert values[-1] == pytest.approx(1.0)


def test_fixed_threshold_baseline():
    dets = [Detection(1, 0.85, BBox(50, 50, 60, 60)), Detection(1, 0.75, BBox(70, 70, 80, 80))]
    labels = step_fixed_threshold(dets, GT, 0.8)
    assert [lab.score for lab in labels if lab.pseudo] == [0.85]


def test_labels_json(tmp_path):
    d = Dataset([Image(1, 100, 100)], [Category(1, "a")], GT)
    labels = [Label(1, GT[0].box), Label(1, BBox(50, 50, 60, 60), pseudo=True, score=0.9)]
    write_labels_json({1: labels}, d, tmp_path / "l.json")
    back = load_dataset(tmp_path / "l.json")
    assert [(a.pseudo, a.score) for a in back.annotations] == [(False, None), (True, 0.9)]


@st.composite
def scenes(draw):
    boxes = st.tuples(st.floats(0, 90), st.floats(0, 90), st.floats(1, 30), st.floats(1, 30)).map(
        lambda t: BBox(t[0], t[1], t[0] + t[2], t[1] + t[3])
    )
    gts = [Annotation(i + 1, 1, draw(st.integers(1, 2)), b) for i, b in enumerate(draw(st.lists(boxes, max_size=5)))]
    dets = [Detection(draw(st.integers(1, 2)), draw(st.floats(0.01, 0.99)), b) for b in draw(st.lists(boxes, max_size=20))]
    params = CalibratorParams(draw(st.floats(0.1, 4)), draw(st.floats(-3, 3)))
    return gts, dets, params


@settings(max_examples=300, deadline=None)
@given(scenes())
def test_step_invariants(scene):
    gts, dets, params = scene
    labels, state = step(dets, gts, fresh(params=params), CFG)
    assert [(lab.category, lab.box) for lab in labels if not lab.pseudo] == [(g.category, g.box) for g in gts]
    for lab in labels:
        if lab.pseudo:
            assert all(iou(lab.box, g.box) < CFG.tau_minus for g in gts if g.category == lab.category)
            assert lab.score > CFG.tau_s
    matched = [d for d in dets if d.confidence > CFG.raw_floor and match_max_iou(d, gts) > CFG.tau_minus]
    assert [(s.p_hat, s.m) for s in state.queue] == [
        (d.confidence, int(match_max_iou(d, gts) > CFG.tau_plus)) for d in matched
    ]


def test_refit_directly():
    state = fresh(queue=CalibrationQueue(10, [CalibrationSample(0.5, 1)] * 3))
    assert refit(state) is False
