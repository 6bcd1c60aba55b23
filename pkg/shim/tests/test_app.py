"""Endpoint behavior through the in-process test client."""

import base64
import json

import numpy as np
import pytest
from contract_util import load_fixture
from fastapi.testclient import TestClient

from modelshim import (
    BackendUnavailableError,
    ShimConfig,
    StubGenerator,
    StubVlm,
    app_from_config,
    config_from_dict,
    create_app,
    decode_latent_b64,
    encode_array_b64,
    load_config,
)


@pytest.fixture
def client():
    return TestClient(app_from_config(ShimConfig()))


class TestHealth:
    def test_matches_published_body(self, client):
        reply = client.get("/healthz")
        assert reply.status_code == 200
        assert reply.json() == load_fixture("health")


class TestGenerate:
    def test_seed_fixture_round_trip(self, client):
        reply = client.post("/v1/generate", json=load_fixture("generate_request_seed"))
        assert reply.status_code == 200
        payload = reply.json()
        assert set(payload) == {"latent_b64", "frames_b64"}
        latent = decode_latent_b64(payload["latent_b64"])
        assert latent.shape == (4, 8, 8, 8)
        assert latent.dtype == np.float32
        assert len(payload["frames_b64"]) == 8

    def test_noise_fixture_passes_through_byte_exact(self, client):
        body = load_fixture("generate_request_noise")
        reply = client.post("/v1/generate", json=body)
        assert reply.status_code == 200
        latent = decode_latent_b64(reply.json()["latent_b64"])
        supplied = decode_latent_b64(body["noise_b64"])
        assert np.array_equal(latent, supplied)

    def test_seeded_generation_is_deterministic(self, client):
        body = load_fixture("generate_request_seed")
        first = client.post("/v1/generate", json=body).json()
        second = client.post("/v1/generate", json=body).json()
        assert first["latent_b64"] == second["latent_b64"]
        assert first["frames_b64"] == second["frames_b64"]

    def test_image_field_is_accepted(self, client):
        body = load_fixture("generate_request_seed")
        body["image_b64"] = base64.b64encode(b"png bytes").decode("ascii")
        assert client.post("/v1/generate", json=body).status_code == 200

    def test_frames_can_be_switched_off(self):
        app = create_app(StubGenerator(render_frames=False), StubVlm())
        reply = TestClient(app).post(
            "/v1/generate", json=load_fixture("generate_request_seed")
        )
        assert set(reply.json()) == {"latent_b64"}

    def test_channel_option_shapes_the_latent(self):
        app = create_app(StubGenerator(channels=8), StubVlm())
        reply = TestClient(app).post(
            "/v1/generate", json=load_fixture("generate_request_seed")
        )
        assert decode_latent_b64(reply.json()["latent_b64"]).shape == (8, 8, 8, 8)


def _seed_body(**mutations):
    body = load_fixture("generate_request_seed")
    body.update(mutations)
    return {k: v for k, v in body.items() if v is not ...}


class TestGenerateValidation:
    @pytest.mark.parametrize(
        "body",
        [
            _seed_body(noise_b64="AAAA"),  # both seed and noise
            _seed_body(seed=...),  # neither
            _seed_body(sampler="ddim"),  # unknown key
            _seed_body(prompt=...),  # missing prompt
            _seed_body(seed=-1),
            _seed_body(seed=True),
            _seed_body(frames=0),
            _seed_body(frames="8"),
            _seed_body(prompt=7),
            _seed_body(seed=..., noise_b64="@@not-base64@@"),
            _seed_body(seed=..., noise_b64="AAAA"),  # base64 but not NPY
            _seed_body(image_b64="@@not-base64@@"),
        ],
    )
    def test_invalid_bodies(self, client, body):
        reply = client.post("/v1/generate", json=body)
        assert reply.status_code == 400
        payload = reply.json()
        assert set(payload) == {"code", "message"}
        assert payload["code"] == "validation"
        assert payload["message"]

    def test_noise_geometry_must_match_request(self, client):
        wrong = encode_array_b64(np.zeros((4, 8, 8, 4), dtype=np.float32))
        reply = client.post("/v1/generate", json=_seed_body(seed=..., noise_b64=wrong))
        assert reply.status_code == 400
        assert reply.json()["code"] == "validation"

    def test_non_object_body(self, client):
        reply = client.post("/v1/generate", json=[1, 2, 3])
        assert reply.status_code == 400
        assert reply.json()["code"] == "validation"

    def test_unparseable_body(self, client):
        reply = client.post(
            "/v1/generate",
            content=b"{not json",
            headers={"Content-Type": "application/json"},
        )
        assert reply.status_code == 400
        assert reply.json()["code"] == "validation"


class TestRefine:
    def test_fixture_round_trip(self, client):
        reply = client.post("/v1/vlm/refine", json=load_fixture("vlm_request"))
        assert reply.status_code == 200
        payload = reply.json()
        assert set(payload) == {"text"}
        assert isinstance(payload["text"], str) and payload["text"]

    def test_configured_reply_surfaces_verbatim(self):
        app = create_app(StubGenerator(), StubVlm(reply='{"refined_prompt": "pinned"}'))
        reply = TestClient(app).post("/v1/vlm/refine", json=load_fixture("vlm_request"))
        assert reply.json()["text"] == '{"refined_prompt": "pinned"}'

    @pytest.mark.parametrize(
        "body",
        [
            {"instruction": "compare"},  # missing video
            {"video_b64": "AAAA"},  # missing instruction
            {"instruction": "", "video_b64": "AAAA"},
            {"instruction": "compare", "video_b64": ""},
            {"instruction": "compare", "video_b64": "@@not-base64@@"},
            {"instruction": "compare", "video_b64": "AAAA", "mode": "fast"},
        ],
    )
    def test_invalid_bodies(self, client, body):
        reply = client.post("/v1/vlm/refine", json=body)
        assert reply.status_code == 400
        assert reply.json()["code"] == "validation"

    def test_error_body_matches_published_shape(self, client):
        reply = client.post("/v1/generate", json=_seed_body(noise_b64="AAAA"))
        assert set(reply.json()) == set(load_fixture("error_validation"))
        assert reply.json()["code"] == load_fixture("error_validation")["code"]


class _DownGenerator:
    def generate(self, **kwargs):
        raise BackendUnavailableError("generator weights are offline")


class _DownVlm:
    def refine(self, instruction, video):
        raise BackendUnavailableError("vlm quota exhausted")


class TestBackendFailure:
    def test_generator_outage_maps_to_503(self):
        app = create_app(_DownGenerator(), StubVlm())
        reply = TestClient(app).post(
            "/v1/generate", json=load_fixture("generate_request_seed")
        )
        assert reply.status_code == 503
        payload = reply.json()
        assert payload["code"] == "backend-unavailable"
        assert "offline" in payload["message"]

    def test_vlm_outage_maps_to_503(self):
        app = create_app(StubGenerator(), _DownVlm())
        reply = TestClient(app).post("/v1/vlm/refine", json=load_fixture("vlm_request"))
        assert reply.status_code == 503
        assert reply.json()["code"] == "backend-unavailable"


class TestConfig:
    def test_defaults_use_stubs(self):
        config = ShimConfig()
        assert config.generator.name == "stub"
        assert config.vlm.name == "stub"

    def test_each_endpoint_names_exactly_one_backend(self):
        with pytest.raises(ValueError, match="exactly one"):
            config_from_dict({"generator": {}})
        with pytest.raises(ValueError, match="exactly one"):
            config_from_dict({"generator": {"stub": {}, "remote": {}}})
        with pytest.raises(ValueError, match="exactly one"):
            config_from_dict({"vlm": "stub"})

    def test_unknown_backend_rejected(self):
        with pytest.raises(ValueError, match="unknown generator backend"):
            config_from_dict({"generator": {"warpdrive": {}}})

    def test_unknown_keys_rejected(self):
        with pytest.raises(ValueError, match="unknown config keys"):
            config_from_dict({"generatr": {"stub": {}}})

    def test_port_range(self):
        with pytest.raises(ValueError, match="port"):
            config_from_dict({"port": 70000})

    def test_backend_options_thread_through(self):
        config = config_from_dict({"generator": {"stub": {"channels": 2}}})
        app = app_from_config(config)
        reply = TestClient(app).post(
            "/v1/generate", json=load_fixture("generate_request_seed")
        )
        assert decode_latent_b64(reply.json()["latent_b64"]).shape[0] == 2

    def test_load_config_from_file_and_env(self, tmp_path, monkeypatch):
        path = tmp_path / "shim.json"
        path.write_text(json.dumps({"port": 9001, "vlm": {"stub": {}}}))
        assert load_config(str(path)).port == 9001
        monkeypatch.setenv("MODELSHIM_CONFIG", str(path))
        assert load_config().port == 9001
        monkeypatch.delenv("MODELSHIM_CONFIG")
        assert load_config() == ShimConfig()

    def test_config_file_must_hold_an_object(self, tmp_path):
        path = tmp_path / "shim.json"
        path.write_text("[]")
        with pytest.raises(ValueError, match="object"):
            load_config(str(path))


class TestStubBackends:
    def test_generator_rejects_bad_channel_count(self):
        with pytest.raises(ValueError, match="channels"):
            StubGenerator(channels=0)

    def test_vlm_rejects_empty_reply(self):
        with pytest.raises(ValueError, match="non-empty"):
            StubVlm(reply="")
