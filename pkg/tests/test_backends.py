from __future__ import annotations

import base64
import io
import json
import socket
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import jsonschema
import numpy as np
import pytest
from PIL import Image

from conftest import load_schema, make_gradient_image
from tamperscope.backends import (
    BackendError,
    ChatTurn,
    DecodingParams,
    EmbeddingVector,
    HttpChatBackend,
    HttpEmbeddingBackend,
    HttpSegmentationBackend,
    RetryPolicy,
    SegmentPrompt,
    call_with_retries,
    history_digest,
    normalize_embedding,
)
from tamperscope.imagetools import encode_image_png
from tamperscope.messages import BoundingBox
from tamperscope.stubs import (
    BoxFillSegmentationBackend,
    HashEmbeddingBackend,
    ProceduralChatBackend,
    ScriptedChatBackend,
)
from tamperscope.trace import Trace


# ---------------------------------------------------------------------------
# Wire types
# ---------------------------------------------------------------------------

class TestChatTurn:
    def test_assistant_turn_cannot_carry_images(self):
        with pytest.raises(ValueError):
            ChatTurn(role="assistant", text="x", images=(b"png",))

    def test_empty_turn_rejected(self):
        with pytest.raises(ValueError):
            ChatTurn(role="user", text="", images=())

    def test_unknown_role_rejected(self):
        with pytest.raises(ValueError):
            ChatTurn(role="tool", text="x")


class TestBackendError:
    @pytest.mark.parametrize(
        "kind,retryable",
        [("transport", True), ("timeout", True), ("protocol", False), ("model-refusal", False)],
    )
    def test_kind_determines_retryable(self, kind, retryable):
        assert BackendError(kind, "d").retryable is retryable

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            BackendError("mystery", "d")


class TestDecodingParams:
    def test_negative_temperature_rejected(self):
        with pytest.raises(ValueError):
            DecodingParams(temperature=-0.1)

    def test_defaults_deterministic(self):
        params = DecodingParams()
        assert params.temperature == 0.0
        assert params.seed == 0


class TestRetryPolicy:
    def test_flaky_transport_retried_to_success(self):
        attempts = []

        def flaky():
            attempts.append(1)
            if len(attempts) < 3:
                raise BackendError("transport", "flap")
            return "ok"

        result, retries = call_with_retries(flaky, RetryPolicy(sleep=lambda s: None))
        assert result == "ok"
        assert retries == 2
        assert len(attempts) == 3

    def test_protocol_error_never_retried(self):
        attempts = []

        def bad():
            attempts.append(1)
            raise BackendError("protocol", "malformed")

        with pytest.raises(BackendError):
            call_with_retries(bad, RetryPolicy(sleep=lambda s: None))
        assert len(attempts) == 1

    def test_exhausted_budget_surfaces_last_error(self):
        def always():
            raise BackendError("timeout", "slow")

        with pytest.raises(BackendError) as err:
            call_with_retries(always, RetryPolicy(attempts=3, sleep=lambda s: None))
        assert err.value.kind == "timeout"


class TestNormalizeEmbedding:
    def test_unit_norm(self, rng):
        vec = normalize_embedding(rng.standard_normal(16), "m")
        assert vec.norm == pytest.approx(1.0, abs=1e-9)

    def test_zero_vector_rejected(self):
        with pytest.raises(BackendError):
            normalize_embedding([0.0, 0.0], "m")

    def test_non_finite_rejected(self):
        with pytest.raises(BackendError):
            normalize_embedding([float("nan"), 1.0], "m")
        with pytest.raises(ValueError):
            EmbeddingVector(values=(float("nan"),), model_id="m")


# ---------------------------------------------------------------------------
# Stubs
# ---------------------------------------------------------------------------

class TestScriptedChat:
    def test_scripted_reply_verbatim(self):
        stub = ScriptedChatBackend(["the reply"])
        out = stub.chat([ChatTurn(role="user", text="q")])
        assert out == "the reply"

    def test_exhausted_script_is_protocol_error(self):
        stub = ScriptedChatBackend([])
        with pytest.raises(BackendError) as err:
            stub.chat([ChatTurn(role="user", text="q")])
        assert err.value.kind == "protocol"

    def test_error_entries_raise(self):
        stub = ScriptedChatBackend([BackendError("timeout", "scripted")])
        with pytest.raises(BackendError) as err:
            stub.chat([ChatTurn(role="user", text="q")])
        assert err.value.kind == "timeout"

    def test_history_must_end_with_user(self):
        stub = ScriptedChatBackend(["x"])
        with pytest.raises(BackendError):
            stub.chat([ChatTurn(role="system", text="s")])
        with pytest.raises(BackendError):
            stub.chat([])


class TestProceduralChat:
    def test_same_history_same_seed_identical(self, gradient_image):
        history = [ChatTurn(role="user", text="inspect", images=(encode_image_png(gradient_image),))]
        a = ProceduralChatBackend(seed=7).chat(history)
        b = ProceduralChatBackend(seed=7).chat(history)
        assert a == b

    def test_different_seed_differs(self, gradient_image):
        history = [ChatTurn(role="user", text="inspect", images=(encode_image_png(gradient_image),))]
        outs = {ProceduralChatBackend(seed=s).chat(history) for s in range(6)}
        assert len(outs) > 1

    def test_reply_is_valid_reasoning_json(self, gradient_image):
        history = [ChatTurn(role="user", text="inspect", images=(encode_image_png(gradient_image),))]
        doc = json.loads(ProceduralChatBackend(seed=1).chat(history))
        assert "boxes" in doc and "analysis" in doc
        for entry in doc["boxes"]:
            x1, y1, x2, y2 = entry["box"]
            assert 0 <= x1 < x2 <= gradient_image.width
            assert 0 <= y1 < y2 <= gradient_image.height


class TestHashEmbedding:
    def test_same_image_identical_vector(self, gradient_image):
        stub = HashEmbeddingBackend()
        payload = encode_image_png(gradient_image)
        assert stub.embed_image(payload) == stub.embed_image(payload)

    def test_norm_is_one(self, gradient_image):
        vec = HashEmbeddingBackend().embed_image(encode_image_png(gradient_image))
        assert vec.norm == pytest.approx(1.0, abs=1e-6)

    def test_different_images_differ(self, rng):
        stub = HashEmbeddingBackend()
        seen = set()
        for _ in range(20):
            arr = rng.integers(0, 255, (8, 8, 3), dtype=np.uint8)
            from tamperscope.imagetools import ImageBuffer

            vec = stub.embed_image(encode_image_png(ImageBuffer.from_array(arr)))
            assert vec.values not in seen  # hash-collision check over corpus
            seen.add(vec.values)

    def test_empty_text_rejected(self):
        with pytest.raises(BackendError):
            HashEmbeddingBackend().embed_text("")

    def test_same_text_identical(self):
        stub = HashEmbeddingBackend()
        assert stub.embed_text("check grain") == stub.embed_text("check grain")

    def test_text_and_image_dims_match(self, gradient_image):
        stub = HashEmbeddingBackend(dim=48)
        a = stub.embed_text("rule text")
        b = stub.embed_image(encode_image_png(gradient_image))
        assert len(a.values) == len(b.values) == 48
        assert a.model_id == b.model_id


class TestBoxFillSegmenter:
    def test_single_box_filled_exactly(self, gradient_image):
        stub = BoxFillSegmentationBackend()
        mask = stub.segment(
            encode_image_png(gradient_image),
            SegmentPrompt(boxes=(BoundingBox(10, 5, 20, 15),)),
        )
        assert mask.positive_count == 100
        assert mask.bits[5:15, 10:20].all()

    def test_two_disjoint_boxes_union_area(self, gradient_image):
        stub = BoxFillSegmentationBackend()
        mask = stub.segment(
            encode_image_png(gradient_image),
            SegmentPrompt(boxes=(BoundingBox(0, 0, 10, 10), BoundingBox(30, 20, 40, 40))),
        )
        assert mask.positive_count == 100 + 200  # rectangle-area oracle

    def test_mask_dims_match_arbitrary_sizes(self, rng):
        from tamperscope.imagetools import ImageBuffer

        stub = BoxFillSegmentationBackend()
        for _ in range(5):
            w = int(rng.integers(4, 40))
            h = int(rng.integers(4, 40))
            img = ImageBuffer.from_array(rng.integers(0, 255, (h, w, 3), dtype=np.uint8))
            mask = stub.segment(
                encode_image_png(img), SegmentPrompt(boxes=(BoundingBox(0, 0, 2, 2),))
            )
            assert mask.dims == (w, h)

    def test_out_of_bounds_box_rejected(self, gradient_image):
        stub = BoxFillSegmentationBackend()
        with pytest.raises(BackendError):
            stub.segment(
                encode_image_png(gradient_image),
                SegmentPrompt(boxes=(BoundingBox(0, 0, 1000, 10),)),
            )

    def test_calls_recorded_in_trace(self, gradient_image):
        trace = Trace.deterministic()
        stub = BoxFillSegmentationBackend()
        stub.segment(
            encode_image_png(gradient_image),
            SegmentPrompt(boxes=(BoundingBox(0, 0, 4, 4),)),
            trace,
        )
        events = [e for e in trace.events if e.kind == "backend_call"]
        assert len(events) == 1
        assert events[0].data["backend"] == "segment"
        assert "digest" in events[0].data and "retries" in events[0].data


# ---------------------------------------------------------------------------
# HTTP clients against a scripted wire server
# ---------------------------------------------------------------------------

class _ScriptedHandler(BaseHTTPRequestHandler):
    script: dict  # path -> list of (status, payload, delay)
    requests_seen: list

    def do_POST(self):
        length = int(self.headers.get("Content-Length", "0"))
        body = json.loads(self.rfile.read(length).decode("utf-8"))
        type(self).requests_seen.append((self.path, body))
        queue = type(self).script.get(self.path, [])
        status, payload, delay = queue.pop(0) if queue else (404, {"error": "no script"}, 0)
        if delay:
            time.sleep(delay)
        data = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):  # quiet
        pass


@pytest.fixture
def wire_server():
    class Handler(_ScriptedHandler):
        script = {}
        requests_seen = []

    server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    base = f"http://127.0.0.1:{server.server_address[1]}"
    yield base, Handler
    server.shutdown()
    thread.join(timeout=2)


def _fast_retry() -> RetryPolicy:
    return RetryPolicy(attempts=3, sleep=lambda s: None)


def _mask_png(width: int, height: int) -> str:
    buf = io.BytesIO()
    Image.fromarray(np.full((height, width), 255, dtype=np.uint8), mode="L").save(
        buf, format="PNG"
    )
    return base64.b64encode(buf.getvalue()).decode("ascii")


class TestHttpChat:
    def test_roundtrip_and_request_schema(self, wire_server, gradient_image):
        base, handler = wire_server
        handler.script["/chat"] = [(200, {"text": "verdict text"}, 0)]
        client = HttpChatBackend(base, timeout=5, retry=_fast_retry())
        history = [
            ChatTurn(role="user", text="inspect", images=(encode_image_png(gradient_image),))
        ]
        out = client.chat(history, DecodingParams(seed=3))
        assert out == "verdict text"
        path, body = handler.requests_seen[0]
        assert path == "/chat"
        jsonschema.validate(body, load_schema("wire_chat_request.schema.json"))
        assert body["seed"] == 3

    def test_http_400_is_protocol_no_retry(self, wire_server):
        base, handler = wire_server
        handler.script["/chat"] = [(400, {"error": "bad request"}, 0)]
        client = HttpChatBackend(base, timeout=5, retry=_fast_retry())
        with pytest.raises(BackendError) as err:
            client.chat([ChatTurn(role="user", text="q")])
        assert err.value.kind == "protocol"
        assert len(handler.requests_seen) == 1

    def test_http_500_retried_then_succeeds(self, wire_server):
        base, handler = wire_server
        handler.script["/chat"] = [
            (500, {"error": "boom"}, 0),
            (502, {"error": "boom"}, 0),
            (200, {"text": "ok"}, 0),
        ]
        client = HttpChatBackend(base, timeout=5, retry=_fast_retry())
        trace = Trace.deterministic()
        assert client.chat([ChatTurn(role="user", text="q")], trace=trace) == "ok"
        assert len(handler.requests_seen) == 3
        call = [e for e in trace.events if e.kind == "backend_call"][0]
        assert call.data["retries"] == 2

    def test_empty_text_is_model_refusal(self, wire_server):
        base, handler = wire_server
        handler.script["/chat"] = [(200, {"text": "   "}, 0)]
        client = HttpChatBackend(base, timeout=5, retry=_fast_retry())
        with pytest.raises(BackendError) as err:
            client.chat([ChatTurn(role="user", text="q")])
        assert err.value.kind == "model-refusal"

    def test_timeout_maps_to_timeout_kind(self, wire_server):
        base, handler = wire_server
        handler.script["/chat"] = [(200, {"text": "late"}, 1.0)] * 3
        client = HttpChatBackend(base, timeout=0.2, retry=_fast_retry())
        with pytest.raises(BackendError) as err:
            client.chat([ChatTurn(role="user", text="q")])
        assert err.value.kind == "timeout"

    def test_connection_refused_is_transport(self):
        sock = socket.socket()
        sock.bind(("127.0.0.1", 0))
        port = sock.getsockname()[1]
        sock.close()
        client = HttpChatBackend(f"http://127.0.0.1:{port}", timeout=1, retry=_fast_retry())
        with pytest.raises(BackendError) as err:
            client.chat([ChatTurn(role="user", text="q")])
        assert err.value.kind == "transport"


class TestHttpEmbed:
    def test_image_embed_normalized_and_schema(self, wire_server, gradient_image):
        base, handler = wire_server
        handler.script["/embed/image"] = [(200, {"values": [3.0, 4.0], "model_id": "clip-x"}, 0)]
        client = HttpEmbeddingBackend(base, timeout=5, retry=_fast_retry())
        vec = client.embed_image(encode_image_png(gradient_image))
        assert vec.model_id == "clip-x"
        assert vec.norm == pytest.approx(1.0, abs=1e-9)
        assert vec.values == pytest.approx((0.6, 0.8))
        path, body = handler.requests_seen[0]
        jsonschema.validate(body, load_schema("wire_embed_image_request.schema.json"))

    def test_text_embed_schema(self, wire_server):
        base, handler = wire_server
        handler.script["/embed/text"] = [(200, {"values": [1.0, 0.0], "model_id": "clip-x"}, 0)]
        client = HttpEmbeddingBackend(base, timeout=5, retry=_fast_retry())
        client.embed_text("check the grain")
        _, body = handler.requests_seen[0]
        jsonschema.validate(body, load_schema("wire_embed_text_request.schema.json"))

    def test_empty_text_rejected_client_side(self, wire_server):
        base, _ = wire_server
        client = HttpEmbeddingBackend(base, timeout=5, retry=_fast_retry())
        with pytest.raises(BackendError):
            client.embed_text("")

    def test_missing_model_id_is_protocol(self, wire_server):
        base, handler = wire_server
        handler.script["/embed/text"] = [(200, {"values": [1.0, 0.0]}, 0)]
        client = HttpEmbeddingBackend(base, timeout=5, retry=_fast_retry())
        with pytest.raises(BackendError) as err:
            client.embed_text("x")
        assert err.value.kind == "protocol"


class TestHttpSegment:
    def test_roundtrip_and_schema(self, wire_server, gradient_image):
        base, handler = wire_server
        handler.script["/segment"] = [
            (200, {"mask": _mask_png(gradient_image.width, gradient_image.height)}, 0)
        ]
        client = HttpSegmentationBackend(base, timeout=5, retry=_fast_retry())
        mask = client.segment(
            encode_image_png(gradient_image), SegmentPrompt(boxes=(BoundingBox(0, 0, 5, 5),))
        )
        assert mask.dims == gradient_image.dims
        _, body = handler.requests_seen[0]
        jsonschema.validate(body, load_schema("wire_segment_request.schema.json"))

    def test_wrong_mask_dims_is_protocol(self, wire_server, gradient_image):
        base, handler = wire_server
        handler.script["/segment"] = [(200, {"mask": _mask_png(3, 3)}, 0)]
        client = HttpSegmentationBackend(base, timeout=5, retry=_fast_retry())
        with pytest.raises(BackendError) as err:
            client.segment(
                encode_image_png(gradient_image),
                SegmentPrompt(boxes=(BoundingBox(0, 0, 5, 5),)),
            )
        assert err.value.kind == "protocol"

    def test_out_of_bounds_box_rejected_before_wire(self, wire_server, gradient_image):
        base, handler = wire_server
        client = HttpSegmentationBackend(base, timeout=5, retry=_fast_retry())
        with pytest.raises(BackendError):
            client.segment(
                encode_image_png(gradient_image),
                SegmentPrompt(boxes=(BoundingBox(0, 0, gradient_image.width + 5, 5),)),
            )
        assert handler.requests_seen == []


class TestDigests:
    def test_history_digest_stable_and_image_sensitive(self, gradient_image):
        png = encode_image_png(gradient_image)
        h1 = [ChatTurn(role="user", text="q", images=(png,))]
        d1 = history_digest(h1, DecodingParams())
        d2 = history_digest(h1, DecodingParams())
        assert d1 == d2
        other = ChatTurn(role="user", text="q!", images=(png,))
        assert history_digest([other], DecodingParams()) != d1
