import base64
import io

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from irisstyle.features import STYLE_KIND, style_feature
from irisstyle.imaging import IRIS, extract_iris
from irisstyle.service import create_app


def b64png(a):
    buf = io.BytesIO()
    Image.fromarray(np.asarray(a, dtype=np.uint8)).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode()


def unpng(s):
    return np.asarray(Image.open(io.BytesIO(base64.b64decode(s))))


@pytest.fixture(scope="module")
def client(backbone):
    return TestClient(create_app(backbone))


def test_health(client, backbone):
    r = client.get("/health")
    assert r.status_code == 200
    assert r.json() == {"status": "ok", "backbone_checksum": backbone.checksum}


def test_features_match_library(client, backbone, small_corpus):
    s = small_corpus.samples[0]
    r = client.post("/features", json={"image_png": b64png(s.pixels), "mask_png": b64png(s.mask)})
    assert r.status_code == 200
    v = np.asarray(r.json()["features"][STYLE_KIND])
    assert v.shape == (1920,)
    ref = style_feature(backbone, extract_iris(s.pixels, s.mask))
    assert np.allclose(v, ref, rtol=1e-6, atol=1e-6)


def test_bad_png_is_400(client):
    r = client.post("/features", json={"image_png": "bm90IGEgcG5n", "mask_png": "bm90IGEgcG5n"})
    assert r.status_code == 400


def test_background_mask_is_422(client, small_corpus):
    s = small_corpus.samples[0]
    r = client.post("/features", json={"image_png": b64png(s.pixels), "mask_png": b64png(np.zeros_like(s.mask))})
    assert r.status_code == 422


def test_unknown_kind_is_422(client, small_corpus):
    s = small_corpus.samples[0]
    r = client.post("/features", json={"image_png": b64png(s.pixels), "mask_png": b64png(s.mask),
                                       "kinds": ["colour"]})
    assert r.status_code == 422


def test_stylize_roundtrip(client, small_corpus):
    a, b = small_corpus.samples[0], small_corpus.samples[-1]
    body = {"content_png": b64png(a.pixels), "content_mask_png": b64png(a.mask),
            "style_png": b64png(b.pixels), "style_mask_png": b64png(b.mask), "epochs": 3, "input_size": 64}
    r = client.post("/stylize", json=body)
    assert r.status_code == 200
    out = r.json()
    img = unpng(out["image_png"])
    assert img.shape == a.pixels.shape
    assert np.array_equal(img[a.mask != IRIS], a.pixels[a.mask != IRIS])
    assert out["final_loss"] <= out["initial_loss"]


def test_stylize_bad_config_is_422(client, small_corpus):
    a = small_corpus.samples[0]
    body = {"content_png": b64png(a.pixels), "content_mask_png": b64png(a.mask),
            "style_png": b64png(a.pixels), "style_mask_png": b64png(a.mask), "alpha": 0, "beta": 0}
    assert client.post("/stylize", json=body).status_code == 422
