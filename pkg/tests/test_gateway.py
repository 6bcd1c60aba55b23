"""Wire contracts, retry policy, HTTP mapping, and the simulated backends."""

import base64
import json
import socket

import numpy as np
import pytest
from stub_http import StubReply

from vfxopt.gateway import (
    BackendError,
    GatewayTimeoutError,
    GeneratorClient,
    GeneratorRequest,
    GeneratorResponse,
    HttpGeneratorBackend,
    HttpVlmBackend,
    PayloadError,
    RequestValidationError,
    ShapeMismatchError,
    TransportError,
    VlmClient,
    VlmRequest,
    VlmResponse,
    decode_tensor_b64,
    encode_tensor_b64,
)
from vfxopt.media import composite_manifest, pack_video_zip, vstack_videos
from vfxopt.simulators import (
    EffectTokens,
    ExhaustedScriptError,
    SimulatedGenerator,
    SimulatedVlm,
    effect_curve_from_tokens,
    latent_to_video,
    measure_curve_from_frames,
    measure_effect_curve,
    parse_effect_tokens,
    video_to_latent,
)
from vfxopt.tensors import TensorShape, gaussian_noise


def noise_b64(shape=(4, 8, 8, 8), seed=0):
    return encode_tensor_b64(gaussian_noise(TensorShape(*shape), seed))


def valid_request(**overrides):
    base = dict(prompt="a test scene", frames=8, height=8, width=8, noise_b64=noise_b64())
    base.update(overrides)
    return GeneratorRequest(**base)


class TestGeneratorRequestContract:
    def test_requires_exactly_one_noise_source(self):
        with pytest.raises(RequestValidationError, match="exactly one"):
            GeneratorRequest(prompt="p", frames=1, height=1, width=1).validate()
        with pytest.raises(RequestValidationError, match="exactly one"):
            GeneratorRequest(
                prompt="p", frames=1, height=1, width=1, noise_b64="x", seed=3
            ).validate()

    def test_seed_alone_is_valid(self):
        GeneratorRequest(prompt="p", frames=1, height=1, width=1, seed=3).validate()

    def test_rejects_negative_seed(self):
        with pytest.raises(RequestValidationError, match="seed"):
            GeneratorRequest(prompt="p", frames=1, height=1, width=1, seed=-1).validate()

    def test_rejects_bad_geometry(self):
        with pytest.raises(RequestValidationError, match="frames"):
            GeneratorRequest(prompt="p", frames=0, height=1, width=1, seed=0).validate()

    def test_wire_body_has_exact_keys(self):
        body = GeneratorRequest(prompt="p", frames=2, height=3, width=4, seed=9).to_wire()
        assert body == {"prompt": "p", "frames": 2, "height": 3, "width": 4, "seed": 9}
        body = valid_request(image_b64="aW1n").to_wire()
        assert set(body) == {"prompt", "frames", "height", "width", "noise_b64", "image_b64"}

    def test_from_wire_round_trip(self):
        req = valid_request()
        assert GeneratorRequest.from_wire(req.to_wire()) == req

    def test_from_wire_rejects_unknown_keys(self):
        body = valid_request().to_wire()
        body["fps"] = 8
        with pytest.raises(RequestValidationError, match="unknown"):
            GeneratorRequest.from_wire(body)

    def test_from_wire_rejects_missing_keys(self):
        with pytest.raises(RequestValidationError, match="missing"):
            GeneratorRequest.from_wire({"prompt": "p"})


class TestResponseContracts:
    def test_generator_response_round_trip(self):
        resp = GeneratorResponse(latent_b64="abc", frames_b64=["x", "y"])
        assert GeneratorResponse.from_wire(resp.to_wire()) == resp

    def test_generator_response_rejects_unknown_keys(self):
        with pytest.raises(PayloadError, match="unknown"):
            GeneratorResponse.from_wire({"latent_b64": "a", "fps": 9})

    def test_generator_response_requires_latent(self):
        with pytest.raises(PayloadError, match="latent_b64"):
            GeneratorResponse.from_wire({"frames_b64": []})

    def test_vlm_request_validation(self):
        with pytest.raises(RequestValidationError, match="instruction"):
            VlmRequest(instruction="", video_b64="data").validate()
        with pytest.raises(RequestValidationError, match="video"):
            VlmRequest(instruction="look", video_b64="").validate()

    def test_vlm_request_from_wire_rejects_extras(self):
        with pytest.raises(RequestValidationError, match="unknown"):
            VlmRequest.from_wire({"instruction": "i", "video_b64": "v", "mode": "x"})

    def test_vlm_response_requires_text(self):
        with pytest.raises(PayloadError):
            VlmResponse.from_wire({})
        with pytest.raises(PayloadError):
            VlmResponse.from_wire({"text": ""})
        assert VlmResponse.from_wire({"text": "ok"}).text == "ok"


class TestTensorB64:
    def test_round_trip(self):
        t = gaussian_noise(TensorShape(2, 3, 4, 5), 11)
        assert decode_tensor_b64(encode_tensor_b64(t)) == t

    def test_invalid_base64(self):
        with pytest.raises(PayloadError, match="base64"):
            decode_tensor_b64("!!! not base64 !!!")

    def test_valid_base64_invalid_npy(self):
        junk = base64.b64encode(b"not an npy payload").decode("ascii")
        with pytest.raises(PayloadError, match="decode"):
            decode_tensor_b64(junk)


class _FlakyGenerator:
    """Fails with a chosen error N times, then succeeds."""

    def __init__(self, failures, error):
        self.failures = failures
        self.error = error
        self.calls = 0
        self.inner = SimulatedGenerator()

    def generate(self, request):
        self.calls += 1
        if self.calls <= self.failures:
            raise self.error
        return self.inner.generate(request)


class TestRetryPolicy:
    def test_two_transport_failures_then_success(self):
        backend = _FlakyGenerator(2, TransportError("connection reset"))
        client = GeneratorClient(backend, retries=2)
        result = client.generate(valid_request())
        assert backend.calls == 3
        assert result.latent.shape.as_tuple() == (4, 8, 8, 8)

    def test_timeouts_are_retried_like_transport(self):
        backend = _FlakyGenerator(1, GatewayTimeoutError("too slow"))
        client = GeneratorClient(backend, retries=2)
        client.generate(valid_request())
        assert backend.calls == 2

    def test_attempts_capped_at_retries_plus_one(self):
        backend = _FlakyGenerator(99, TransportError("down"))
        client = GeneratorClient(backend, retries=2)
        with pytest.raises(TransportError):
            client.generate(valid_request())
        assert backend.calls == 3

    def test_zero_retries_means_single_attempt(self):
        backend = _FlakyGenerator(99, TransportError("down"))
        client = GeneratorClient(backend, retries=0)
        with pytest.raises(TransportError):
            client.generate(valid_request())
        assert backend.calls == 1

    def test_backend_rejections_never_retry(self):
        backend = _FlakyGenerator(99, BackendError(422, "validation", "bad geometry"))
        client = GeneratorClient(backend, retries=2)
        with pytest.raises(BackendError):
            client.generate(valid_request())
        assert backend.calls == 1

    def test_invalid_request_never_reaches_backend(self):
        backend = _FlakyGenerator(0, None)
        client = GeneratorClient(backend, retries=2)
        with pytest.raises(RequestValidationError):
            client.generate(GeneratorRequest(prompt="p", frames=1, height=1, width=1))
        assert backend.calls == 0

    def test_vlm_client_retries_too(self):
        class FlakyVlm:
            calls = 0

            def refine(self, request):
                FlakyVlm.calls += 1
                if FlakyVlm.calls < 3:
                    raise TransportError("flaky")
                return VlmResponse(text="fine")

        client = VlmClient(FlakyVlm(), retries=2)
        assert client.refine(VlmRequest(instruction="i", video_b64="v")).text == "fine"
        assert FlakyVlm.calls == 3


class TestClientShapeChecks:
    def test_latent_geometry_must_match_request(self):
        class WrongShape:
            def generate(self, request):
                wrong = gaussian_noise(TensorShape(4, 2, 8, 8), 0)
                return GeneratorResponse(latent_b64=encode_tensor_b64(wrong))

        client = GeneratorClient(WrongShape())
        with pytest.raises(ShapeMismatchError, match="geometry"):
            client.generate(valid_request())

    def test_channel_count_must_match_supplied_noise(self):
        class WrongChannels:
            def generate(self, request):
                wrong = gaussian_noise(TensorShape(2, 8, 8, 8), 0)
                return GeneratorResponse(latent_b64=encode_tensor_b64(wrong))

        client = GeneratorClient(WrongChannels())
        with pytest.raises(ShapeMismatchError, match="channels"):
            client.generate(valid_request())

    def test_noise_geometry_checked_before_send(self):
        backend = _FlakyGenerator(0, None)
        client = GeneratorClient(backend)
        bad = valid_request(noise_b64=noise_b64(shape=(4, 2, 8, 8)))
        with pytest.raises(RequestValidationError, match="geometry"):
            client.generate(bad)
        assert backend.calls == 0

    def test_frames_stamped_with_client_rate(self):
        client = GeneratorClient(SimulatedGenerator(), frame_rate=12.0)
        result = client.generate(valid_request())
        assert result.video is not None
        assert result.video.fps == 12.0
        assert len(result.video.frames) == 8


class TestHttpMapping:
    def test_generate_round_trip(self, http_stub):
        state, url = http_stub
        latent = gaussian_noise(TensorShape(4, 8, 8, 8), 1)
        state.replies.append(StubReply(body={"latent_b64": encode_tensor_b64(latent)}))
        client = GeneratorClient(HttpGeneratorBackend(url, timeout=5.0))
        result = client.generate(valid_request())
        assert result.latent == latent
        assert state.seen[0]["path"] == "/v1/generate"
        assert set(state.seen[0]["body"]) == {"prompt", "frames", "height", "width", "noise_b64"}

    def test_vlm_round_trip(self, http_stub):
        state, url = http_stub
        state.replies.append(StubReply(body={"text": '{"analysis": {}, "refined_prompt": "x"}'}))
        client = VlmClient(HttpVlmBackend(url, timeout=5.0))
        reply = client.refine(VlmRequest(instruction="look", video_b64="dmlk"))
        assert "refined_prompt" in reply.text
        assert state.seen[0]["path"] == "/v1/vlm/refine"

    def test_bearer_token_header(self, http_stub):
        state, url = http_stub
        state.replies.append(StubReply(body={"text": "ok"}))
        backend = HttpVlmBackend(url, timeout=5.0, token="sekret")
        VlmClient(backend).refine(VlmRequest(instruction="i", video_b64="v"))
        assert state.seen[0]["headers"]["Authorization"] == "Bearer sekret"

    def test_422_maps_to_backend_error_without_retry(self, http_stub):
        state, url = http_stub
        state.replies.append(
            StubReply(status=422, body={"code": "validation", "message": "bad noise"})
        )
        client = GeneratorClient(HttpGeneratorBackend(url, timeout=5.0), retries=2)
        with pytest.raises(BackendError) as info:
            client.generate(valid_request())
        assert info.value.status == 422
        assert info.value.code == "validation"
        assert len(state.seen) == 1

    def test_500_maps_to_backend_error(self, http_stub):
        state, url = http_stub
        state.replies.append(StubReply(status=500, body={"code": "backend", "message": "oom"}))
        client = GeneratorClient(HttpGeneratorBackend(url, timeout=5.0), retries=2)
        with pytest.raises(BackendError) as info:
            client.generate(valid_request())
        assert info.value.status == 500
        assert len(state.seen) == 1

    def test_timeout_maps_to_timeout_error(self, http_stub):
        state, url = http_stub
        state.replies.append(StubReply(body={"text": "late"}, delay=2.0))
        backend = HttpVlmBackend(url, timeout=0.2)
        with pytest.raises(GatewayTimeoutError):
            VlmClient(backend, retries=0).refine(VlmRequest(instruction="i", video_b64="v"))

    def test_non_json_success_is_payload_error(self, http_stub):
        state, url = http_stub
        state.replies.append(StubReply(body="<html>hello</html>", content_type="text/html"))
        client = VlmClient(HttpVlmBackend(url, timeout=5.0))
        with pytest.raises(PayloadError):
            client.refine(VlmRequest(instruction="i", video_b64="v"))

    def test_connection_refused_is_transport_error(self):
        probe = socket.socket()
        probe.bind(("127.0.0.1", 0))
        port = probe.getsockname()[1]
        probe.close()
        backend = HttpVlmBackend(f"http://127.0.0.1:{port}", timeout=1.0)
        with pytest.raises(TransportError):
            VlmClient(backend, retries=0).refine(VlmRequest(instruction="i", video_b64="v"))


class TestEffectTokens:
    def test_defaults_when_absent(self):
        tokens = parse_effect_tokens("a castle by the sea")
        assert tokens == EffectTokens(intensity=0.5, onset=0.0, speed="slow")

    def test_full_parse(self):
        tokens = parse_effect_tokens("x intensity=0.7 onset=0.25 speed=fast y")
        assert tokens == EffectTokens(intensity=0.7, onset=0.25, speed="fast")

    def test_values_clamped_to_unit_range(self):
        tokens = parse_effect_tokens("intensity=7 onset=2.5")
        assert tokens.intensity == 1.0
        assert tokens.onset == 1.0

    def test_curve_slow_ramp(self):
        curve = effect_curve_from_tokens(EffectTokens(0.5, 0.0, "slow"), 16)
        assert curve[0] == pytest.approx(0.5 / 12)
        assert curve[11] == pytest.approx(0.5)
        assert curve[15] == pytest.approx(0.5)

    def test_curve_fast_ramp_tops_out_quickly(self):
        curve = effect_curve_from_tokens(EffectTokens(0.5, 0.0, "fast"), 16)
        assert curve[3] == pytest.approx(0.5)

    def test_curve_onset_delays_start(self):
        curve = effect_curve_from_tokens(EffectTokens(1.0, 0.5, "slow"), 8)
        assert np.all(curve[:4] == 0.0)
        assert np.all(curve[4:] > 0.0)


class TestSimulatedGenerator:
    def test_deterministic_for_fixed_request(self):
        request = valid_request(prompt="x intensity=0.4")
        first = SimulatedGenerator().generate(request)
        second = SimulatedGenerator().generate(request)
        assert first.latent_b64 == second.latent_b64
        assert first.frames_b64 == second.frames_b64

    def test_curve_peaks_at_intensity_token(self):
        request = valid_request(
            prompt="scene intensity=0.7 onset=0 speed=slow",
            frames=16,
            noise_b64=noise_b64(shape=(4, 16, 8, 8)),
        )
        response = SimulatedGenerator().generate(request)
        curve = measure_effect_curve(decode_tensor_b64(response.latent_b64))
        assert curve.max() == pytest.approx(0.7, abs=1e-5)

    def test_onset_half_means_first_half_is_flat(self):
        request = valid_request(prompt="scene onset=0.5 intensity=1")
        response = SimulatedGenerator().generate(request)
        curve = measure_effect_curve(decode_tensor_b64(response.latent_b64))
        assert np.all(np.abs(curve[:4]) < 1e-5)
        assert np.all(curve[4:] > 0.01)

    def test_zero_intensity_is_flat(self):
        request = valid_request(prompt="scene intensity=0")
        response = SimulatedGenerator().generate(request)
        curve = measure_effect_curve(decode_tensor_b64(response.latent_b64))
        assert np.all(np.abs(curve) < 1e-5)

    def test_seed_mode_is_deterministic(self):
        request = GeneratorRequest(prompt="p intensity=0.3", frames=4, height=4, width=4, seed=7)
        sim = SimulatedGenerator()
        assert sim.generate(request).latent_b64 == sim.generate(request).latent_b64
        other = GeneratorRequest(prompt="p intensity=0.3", frames=4, height=4, width=4, seed=8)
        assert sim.generate(request).latent_b64 != sim.generate(other).latent_b64

    def test_bad_noise_geometry_rejected(self):
        request = valid_request(noise_b64=noise_b64(shape=(4, 4, 8, 8)))
        with pytest.raises(RequestValidationError):
            SimulatedGenerator().generate(request)

    def test_renders_match_latent_curve(self):
        request = valid_request(prompt="scene intensity=0.6", frames=8)
        response = SimulatedGenerator().generate(request)
        latent = decode_tensor_b64(response.latent_b64)
        video = latent_to_video(latent, 8.0)
        measured = measure_curve_from_frames(video.frames)
        assert np.max(np.abs(measured - measure_effect_curve(latent))) < 1.0 / 255.0

    def test_video_to_latent_inverts_rendering(self):
        request = valid_request(prompt="scene intensity=0.5", frames=8)
        latent = decode_tensor_b64(SimulatedGenerator().generate(request).latent_b64)
        video = latent_to_video(latent, 8.0)
        recovered = video_to_latent(video, channels=4)
        gray = latent.data.astype(np.float64).mean(axis=0)
        assert np.max(np.abs(recovered.data[0] - gray)) < 0.005


def oracle_composite_b64(ref_prompt, cur_prompt, frames=16, size=16, with_previous=None):
    sim = SimulatedGenerator()

    def render(prompt, label):
        request = GeneratorRequest(
            prompt=prompt, frames=frames, height=size, width=size, seed=1
        )
        latent = decode_tensor_b64(sim.generate(request).latent_b64)
        video = latent_to_video(latent, 8.0, label)
        return video

    clips = [render(ref_prompt, "A")]
    if with_previous is not None:
        clips.append(render(with_previous, "B"))
    clips.append(render(cur_prompt, "C"))
    stacked = vstack_videos(clips)
    manifest = composite_manifest(clips)
    return base64.b64encode(pack_video_zip(stacked, manifest)).decode("ascii")


class TestSimulatedVlmScripted:
    def test_replays_in_order_then_exhausts(self):
        vlm = SimulatedVlm(script=["one", "two"])
        request = VlmRequest(instruction="i", video_b64="v")
        assert vlm.refine(request).text == "one"
        assert vlm.refine(request).text == "two"
        with pytest.raises(ExhaustedScriptError):
            vlm.refine(request)
        assert vlm.calls == 3

    def test_empty_instruction_rejected(self):
        with pytest.raises(RequestValidationError):
            SimulatedVlm(script=["x"]).refine(VlmRequest(instruction="", video_b64="v"))


class TestSimulatedVlmOracle:
    def test_moves_intensity_halfway_toward_reference(self):
        video_b64 = oracle_composite_b64(
            "statue intensity=0.8 onset=0 speed=slow",
            "statue intensity=0.4 onset=0 speed=slow",
        )
        instruction = "Refine the prompt.\nCurrent prompt: statue intensity=0.4 onset=0 speed=slow"
        reply = SimulatedVlm().refine(VlmRequest(instruction=instruction, video_b64=video_b64))
        parsed = json.loads(reply.text)
        assert "intensity=0.6" in parsed["refined_prompt"]
        assert "speed=slow" in parsed["refined_prompt"]

    def test_matching_segments_are_a_fixed_point(self):
        prompt = "statue intensity=0.8 onset=0 speed=slow"
        video_b64 = oracle_composite_b64(prompt, prompt)
        instruction = f"Refine the prompt.\nCurrent prompt: {prompt}"
        reply = SimulatedVlm().refine(VlmRequest(instruction=instruction, video_b64=video_b64))
        assert json.loads(reply.text)["refined_prompt"] == prompt

    def test_surrounding_text_is_copied_verbatim(self):
        video_b64 = oracle_composite_b64(
            "x intensity=0.8 onset=0 speed=slow",
            "a stone statue in a quiet courtyard, crumbling, intensity=0.4 onset=0 speed=slow",
        )
        instruction = (
            "Refine.\nCurrent prompt: a stone statue in a quiet courtyard, crumbling, "
            "intensity=0.4 onset=0 speed=slow"
        )
        parsed = json.loads(
            SimulatedVlm().refine(VlmRequest(instruction=instruction, video_b64=video_b64)).text
        )
        assert parsed["refined_prompt"].startswith("a stone statue in a quiet courtyard, crumbling,")

    def test_adopts_reference_pace(self):
        video_b64 = oracle_composite_b64(
            "x intensity=0.8 onset=0 speed=fast",
            "x intensity=0.8 onset=0 speed=slow",
        )
        instruction = "Refine.\nCurrent prompt: x intensity=0.8 onset=0 speed=slow"
        parsed = json.loads(
            SimulatedVlm().refine(VlmRequest(instruction=instruction, video_b64=video_b64)).text
        )
        assert "speed=fast" in parsed["refined_prompt"]

    def test_analysis_keys_without_previous_segment(self):
        video_b64 = oracle_composite_b64(
            "x intensity=0.8 onset=0 speed=slow", "x intensity=0.4 onset=0 speed=slow"
        )
        instruction = "Refine.\nCurrent prompt: x intensity=0.4 onset=0 speed=slow"
        parsed = json.loads(
            SimulatedVlm().refine(VlmRequest(instruction=instruction, video_b64=video_b64)).text
        )
        analysis = parsed["analysis"]
        assert set(analysis) == {
            "reference_description",
            "new_generated_description",
            "comparison",
        }

    def test_analysis_includes_previous_description_with_b_segment(self):
        video_b64 = oracle_composite_b64(
            "x intensity=0.8 onset=0 speed=slow",
            "x intensity=0.6 onset=0 speed=slow",
            with_previous="x intensity=0.4 onset=0 speed=slow",
        )
        instruction = "Refine.\nCurrent prompt: x intensity=0.6 onset=0 speed=slow"
        parsed = json.loads(
            SimulatedVlm().refine(VlmRequest(instruction=instruction, video_b64=video_b64)).text
        )
        assert "last_generated_description" in parsed["analysis"]

    def test_composite_without_reference_segment_rejected(self):
        sim = SimulatedGenerator()
        request = GeneratorRequest(prompt="x intensity=0.5", frames=8, height=8, width=8, seed=0)
        latent = decode_tensor_b64(sim.generate(request).latent_b64)
        lone = latent_to_video(latent, 8.0, "C")
        stacked = vstack_videos([lone, lone])
        manifest = composite_manifest([lone, lone])
        payload = base64.b64encode(pack_video_zip(stacked, manifest)).decode("ascii")
        with pytest.raises(RequestValidationError, match="segments"):
            SimulatedVlm().refine(VlmRequest(instruction="i\nCurrent prompt: x", video_b64=payload))
