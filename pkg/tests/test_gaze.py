import numpy as np
import pytest

from irisstyle.data import PUPIL
from irisstyle.gaze import (N_LANDMARKS, GazeError, GazeTrainConfig, angular_error, constant_baseline_error,
                            evaluate_gaze, extract_landmarks, fit_ellipse, train_gaze_estimator)
from irisstyle.imaging import extract_iris, reinsert
from irisstyle.segmentation import GroundTruthProvider
from irisstyle.transfer import TransferConfig, transfer


def test_angle_examples():
    assert angular_error((0, 0, 1), (0, 0, 1)) == 0.0
    assert abs(angular_error((1, 0, 0), (0, 1, 0)) - 90) <= 1e-12
    assert abs(angular_error((1, 0, 0), np.array([1, 1, 0]) / np.sqrt(2)) - 45) <= 1e-6


def test_angle_properties():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a, b = rng.normal(size=3), rng.normal(size=3)
        e = angular_error(a, b)
        assert 0 <= e <= 180
        assert abs(e - angular_error(b, a)) <= 1e-9
        assert abs(e - angular_error(3.5 * a, 0.2 * b)) <= 1e-9


def test_zero_vector_is_error():
    with pytest.raises(GazeError):
        angular_error((0, 0, 0), (0, 0, 1))


def test_circle_fit():
    t = np.linspace(0, 2 * np.pi, 100, endpoint=False)
    e = fit_ellipse(np.c_[50 + 10 * np.cos(t), 40 + 10 * np.sin(t)])
    assert abs(e.cx - 50) <= 0.1 and abs(e.cy - 40) <= 0.1
    assert abs(e.a - 10) <= 0.1 and abs(e.b - 10) <= 0.1


def test_axis_aligned_ellipse_fit():
    t = np.radians(np.arange(360))
    e = fit_ellipse(np.c_[20 * np.cos(t), 10 * np.sin(t)])
    assert abs(e.a - 20) <= 0.1 and abs(e.b - 10) <= 0.1
    assert min(e.theta, np.pi - e.theta) <= 1e-6
    assert e.residual <= 1e-9


def test_rotated_ellipse_within_one_percent():
    t = np.linspace(0, 2 * np.pi, 36, endpoint=False)
    th = 0.6
    x, y = 30 * np.cos(t), 12 * np.sin(t)
    pts = np.c_[7 + x * np.cos(th) - y * np.sin(th), -3 + x * np.sin(th) + y * np.cos(th)]
    e = fit_ellipse(pts)
    assert abs(e.a - 30) <= 0.3 and abs(e.b - 12) <= 0.12
    assert abs(e.theta - th) <= 0.01 and abs(e.cx - 7) <= 0.3 and abs(e.cy + 3) <= 0.3


def test_too_few_or_collinear_points():
    with pytest.raises(GazeError):
        fit_ellipse([(0, 0), (1, 0), (0, 1), (1, 1)])
    with pytest.raises(GazeError):
        fit_ellipse([(i, 2 * i) for i in range(10)])


def test_landmarks_track_pupil_centroid(corpus):
    for s in corpus.samples[:10]:
        v = extract_landmarks(s.mask)
        h, w = s.mask.shape
        rows, cols = np.nonzero(s.mask == PUPIL)
        assert v.shape == (N_LANDMARKS,)
        assert abs(v[0] * w - cols.mean()) <= 0.5 and abs(v[1] * h - rows.mean()) <= 0.5
        assert np.array_equal(v, extract_landmarks(s.mask))


def test_landmarks_need_pupil_and_iris():
    with pytest.raises(GazeError):
        extract_landmarks(np.zeros((40, 60), np.uint8))


def test_empty_training_set_is_error():
    with pytest.raises(GazeError):
        train_gaze_estimator("appearance", [])


def _gaze_split(corpus):
    test_users = set(corpus.classes[-2:])
    train = [s for s in corpus.samples if s.user_id not in test_users]
    test = [s for s in corpus.samples if s.user_id in test_users]
    return train, test


@pytest.fixture(scope="module")
def appearance(corpus):
    train, test = _gaze_split(corpus)
    return train_gaze_estimator("appearance", train, GazeTrainConfig(epochs=100)), train, test


def test_appearance_beats_constant_baseline(appearance):
    est, train, test = appearance
    assert evaluate_gaze(est, test).mean_error < constant_baseline_error(train, test)


def test_model_based_beats_constant_baseline(corpus):
    train, test = _gaze_split(corpus)
    est = train_gaze_estimator("model", train, GazeTrainConfig(epochs=30), mask_provider=GroundTruthProvider())
    assert evaluate_gaze(est, test).mean_error < constant_baseline_error(train, test)


def test_training_is_deterministic(small_corpus):
    cfg = GazeTrainConfig(epochs=3, hidden=(64,))
    a = train_gaze_estimator("appearance", small_corpus.samples, cfg)
    b = train_gaze_estimator("appearance", small_corpus.samples, cfg)
    assert a.checksum() == b.checksum() and a.history == b.history


def test_identity_transform(appearance):
    est, _, test = appearance
    before = est.checksum()
    plain = evaluate_gaze(est, test)
    same = evaluate_gaze(est, test, transform=lambda s: s.pixels.copy())
    assert np.array_equal(plain.errors, same.errors)
    assert est.checksum() == before


@pytest.fixture(scope="module")
def stylized_delta(appearance, backbone):
    est, _, test = appearance
    rng = np.random.default_rng(0)
    cfg = TransferConfig(epochs=50, input_size=64)

    def stylize(s):
        others = [d for d in test if d.user_id != s.user_id]
        donor = others[int(rng.integers(len(others)))]
        content = extract_iris(s.pixels, s.mask)
        res = transfer(backbone, content, extract_iris(donor.pixels, donor.mask), cfg)
        return reinsert(s.pixels, res.stylized, s.mask)

    return evaluate_gaze(est, test, transform=stylize).mean_error - evaluate_gaze(est, test).mean_error


@pytest.mark.slow
def test_stylization_does_not_hurt_gaze(stylized_delta):
    assert stylized_delta < 1.0, stylized_delta


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="the small random appearance encoder gets about 1.5 deg better "
                                      "on stylized eyes, outside the two-sided 1.0 deg band")
def test_stylization_barely_moves_gaze_error(stylized_delta):
    assert abs(stylized_delta) < 1.0, stylized_delta
