"""Black-box classifier gateway.

Explainers never see model internals; they call :func:`predict_batch`
against either a built-in synthetic oracle (analytically known saliency,
used throughout the test suite) or an external model process speaking a
line-delimited JSON protocol over its standard streams:

  backend -> host   {"type":"hello","classes":[...],"input_size":[W,H]}
  host -> backend   {"type":"predict","id":N,"images":[{"w":..,"h":..,"c":..,"pix":"<b64>"}]}
  backend -> host   {"type":"probs","id":N,"probs":[[...],...]}
  backend -> host   {"type":"error","id":N,"msg":"..."}

One JSON object per line, UTF-8, unknown fields ignored. Pixels travel
as row-major 8-bit values (RGB interleaved for c=3).
"""

from __future__ import annotations

import base64
import json
import shlex
import subprocess
import threading
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .imaging import ensure_image

PROB_SUM_TOL = 1e-3


class GatewayError(RuntimeError):
    """Base class for classifier gateway failures."""


class BackendProcessError(GatewayError):
    """The backend process died or its streams closed."""


class BackendProtocolError(GatewayError):
    """The backend sent something outside the wire protocol."""


class BackendReportedError(GatewayError):
    """The backend answered a request with an error object."""


class InputSizeError(GatewayError):
    """An image does not match the classifier's declared input size."""


def validate_classes(names: Sequence[str]) -> list[str]:
    names = list(names)
    if not names:
        raise ValueError("class list must be non-empty")
    if len(set(names)) != len(names):
        raise ValueError(f"class names must be unique, got {names}")
    return names


def _check_prob_rows(probs: np.ndarray, n_rows: int, n_classes: int, origin: str) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (n_rows, n_classes):
        raise BackendProtocolError(
            f"{origin}: expected {n_rows}x{n_classes} probabilities, got shape {probs.shape}"
        )
    if not np.all(np.isfinite(probs)) or probs.min() < -1e-9 or probs.max() > 1 + 1e-9:
        raise BackendProtocolError(f"{origin}: probabilities outside [0, 1]")
    sums = probs.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > PROB_SUM_TOL):
        raise BackendProtocolError(f"{origin}: probability rows do not sum to 1 (tol {PROB_SUM_TOL})")
    return probs


class Classifier:
    """Interface every explainer consumes: classes, input size, batched inference."""

    classes: list[str]
    input_size: tuple[int, int]  # (width, height)
    batch_size: int = 32

    def predict(self, images: Sequence[np.ndarray]) -> np.ndarray:
        raise NotImplementedError

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def predict_batch(classifier: Classifier, images: Sequence[np.ndarray]) -> np.ndarray:
    """Classify a list of images, preserving order; returns (N, K) probabilities."""
    w, h = classifier.input_size
    for i, img in enumerate(images):
        if img.shape[0] != h or img.shape[1] != w:
            raise InputSizeError(
                f"image {i} is {img.shape[1]}x{img.shape[0]}, classifier expects {w}x{h}"
            )
    if len(images) == 0:
        return np.zeros((0, len(classifier.classes)))
    chunks = []
    bs = max(1, classifier.batch_size)
    for start in range(0, len(images), bs):
        batch = images[start:start + bs]
        probs = classifier.predict(batch)
        chunks.append(_check_prob_rows(probs, len(batch), len(classifier.classes), "backend"))
    return np.concatenate(chunks, axis=0)


# ---------------------------------------------------------------------------
# Synthetic oracles with analytically known saliency.
# ---------------------------------------------------------------------------

ORACLE_KINDS = ("mean-brightness", "region-indicator", "linear-weights")


@dataclass
class OracleSpec:
    """Parameters of a built-in deterministic classifier.

    kind "mean-brightness": two classes, p0 = mean pixel value.
    kind "region-indicator": `masks` holds one boolean (H, W) mask per
        class (a single mask implies an indicator/complement pair);
        scores are mean brightness inside each mask, renormalized.
    kind "linear-weights": `weights` is an (H, W) field a with
        f0 = clamp(sum_p a_p * I_p, 0, 1) and the complement class
        absorbing the remainder.
    """

    kind: str
    masks: list[np.ndarray] = field(default_factory=list)
    weights: np.ndarray | None = None


def _batch_pixel_means(images: Sequence[np.ndarray]) -> np.ndarray:
    """Stack a batch into (N, H, W) channel-mean planes.

    Hot path for the samplers: no per-pixel validation here, the oracles
    are total functions of whatever values arrive.
    """
    arr = np.stack(images)
    return arr if arr.ndim == 3 else arr.mean(axis=3)


class _Oracle(Classifier):
    def __init__(self, classes: Sequence[str], input_size: tuple[int, int]):
        self.classes = validate_classes(classes)
        self.input_size = input_size
        self.batch_size = 256

    def predict(self, images: Sequence[np.ndarray]) -> np.ndarray:
        raise NotImplementedError


class MeanBrightnessOracle(_Oracle):
    def predict(self, images):
        p = _batch_pixel_means(images).mean(axis=(1, 2))
        return np.stack([p, 1.0 - p], axis=1)


class RegionIndicatorOracle(_Oracle):
    def __init__(self, classes, input_size, masks: list[np.ndarray]):
        super().__init__(classes, input_size)
        self.masks = [np.asarray(m, dtype=bool) for m in masks]
        w, h = input_size
        for m in self.masks:
            if m.shape != (h, w):
                raise ValueError(f"indicator mask shape {m.shape} does not match input {w}x{h}")
            if not m.any():
                raise ValueError("indicator mask is empty")

    def predict(self, images):
        means = _batch_pixel_means(images)
        scores = np.stack([means[:, m].mean(axis=1) for m in self.masks], axis=1)
        if len(self.masks) == 1:
            return np.concatenate([scores, 1.0 - scores], axis=1)
        totals = scores.sum(axis=1, keepdims=True)
        uniform = np.full_like(scores, 1.0 / scores.shape[1])
        with np.errstate(invalid="ignore", divide="ignore"):
            normalized = scores / totals
        return np.where(totals > 0, normalized, uniform)


class LinearWeightsOracle(_Oracle):
    def __init__(self, classes, input_size, weights: np.ndarray):
        super().__init__(classes, input_size)
        self.weights = np.asarray(weights, dtype=np.float64)
        w, h = input_size
        if self.weights.shape != (h, w):
            raise ValueError(f"weight field shape {self.weights.shape} does not match input {w}x{h}")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("weight field must be finite")

    def predict(self, images):
        p = np.clip(np.tensordot(_batch_pixel_means(images), self.weights, axes=2), 0.0, 1.0)
        return np.stack([p, 1.0 - p], axis=1)


def make_oracle(spec: OracleSpec, classes: Sequence[str],
                input_size: tuple[int, int] = (224, 224)) -> Classifier:
    """Build a deterministic, stateless classifier from an oracle spec."""
    classes = validate_classes(classes)
    if spec.kind == "mean-brightness":
        if len(classes) != 2:
            raise ValueError("mean-brightness oracle needs exactly 2 classes")
        return MeanBrightnessOracle(classes, input_size)
    if spec.kind == "region-indicator":
        if not spec.masks:
            raise ValueError("region-indicator oracle needs at least one mask")
        expected = 2 if len(spec.masks) == 1 else len(spec.masks)
        if len(classes) != expected:
            raise ValueError(f"region-indicator with {len(spec.masks)} mask(s) needs {expected} classes")
        return RegionIndicatorOracle(classes, input_size, spec.masks)
    if spec.kind == "linear-weights":
        if spec.weights is None:
            raise ValueError("linear-weights oracle needs a weight field")
        if len(classes) != 2:
            raise ValueError("linear-weights oracle needs exactly 2 classes")
        return LinearWeightsOracle(classes, input_size, spec.weights)
    raise ValueError(f"unknown oracle kind {spec.kind!r} (expected one of {ORACLE_KINDS})")


# ---------------------------------------------------------------------------
# Wire helpers and the subprocess-backed classifier.
# ---------------------------------------------------------------------------


def encode_wire_image(img: np.ndarray) -> dict:
    """Encode a float image as the wire's row-major 8-bit payload."""
    img = ensure_image(img)
    h, w = img.shape[:2]
    c = 1 if img.ndim == 2 else img.shape[2]
    data = np.round(img * 255.0).astype(np.uint8)
    return {"w": w, "h": h, "c": c, "pix": base64.b64encode(data.tobytes(order="C")).decode("ascii")}


def decode_wire_image(obj: dict) -> np.ndarray:
    w, h, c = int(obj["w"]), int(obj["h"]), int(obj["c"])
    raw = base64.b64decode(obj["pix"])
    if len(raw) != w * h * c:
        raise BackendProtocolError(f"image payload holds {len(raw)} bytes, expected {w * h * c}")
    arr = np.frombuffer(raw, dtype=np.uint8).astype(np.float64) / 255.0
    return arr.reshape(h, w) if c == 1 else arr.reshape(h, w, c)


class SubprocessClassifier(Classifier):
    """Classifier backed by an external process speaking the wire protocol.

    Wire access is serialized internally, so predict() may be called from
    several workers concurrently.
    """

    def __init__(self, command: str | Sequence[str], batch_size: int = 32):
        argv = shlex.split(command) if isinstance(command, str) else list(command)
        self._proc = subprocess.Popen(
            argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
            text=True, encoding="utf-8", bufsize=1,
        )
        self._lock = threading.Lock()
        self._next_id = 0
        self.batch_size = batch_size
        hello = self._read_obj()
        if hello.get("type") != "hello":
            raise BackendProtocolError(f"expected hello handshake, got {hello.get('type')!r}")
        try:
            self.classes = validate_classes(hello["classes"])
            size = hello["input_size"]
            self.input_size = (int(size[0]), int(size[1]))
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise BackendProtocolError(f"malformed hello: {hello!r}") from exc

    def _read_obj(self) -> dict:
        line = self._proc.stdout.readline()
        if line == "":
            code = self._proc.poll()
            raise BackendProcessError(f"backend closed its stream (exit status {code})")
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise BackendProtocolError(f"backend sent invalid JSON: {line!r}") from exc
        if not isinstance(obj, dict):
            raise BackendProtocolError(f"backend sent a non-object line: {line!r}")
        return obj

    def _send_obj(self, obj: dict) -> None:
        try:
            self._proc.stdin.write(json.dumps(obj) + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise BackendProcessError("backend stdin closed") from exc

    def predict(self, images: Sequence[np.ndarray]) -> np.ndarray:
        with self._lock:
            req_id = self._next_id
            self._next_id += 1
            self._send_obj({
                "type": "predict",
                "id": req_id,
                "images": [encode_wire_image(img) for img in images],
            })
            resp = self._read_obj()
        kind = resp.get("type")
        if kind == "error":
            raise BackendReportedError(str(resp.get("msg", "unspecified backend error")))
        if kind != "probs":
            raise BackendProtocolError(f"expected probs response, got {kind!r}")
        if resp.get("id") != req_id:
            raise BackendProtocolError(f"response id {resp.get('id')} does not match request {req_id}")
        return np.asarray(resp.get("probs", []), dtype=np.float64)

    def close(self) -> None:
        if self._proc.poll() is None:
            try:
                self._proc.stdin.close()
            except OSError:
                pass
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.terminate()
                try:
                    self._proc.wait(timeout=5)
                except subprocess.TimeoutExpired:
                    self._proc.kill()


def serve(classifier: Classifier, in_stream, out_stream) -> None:
    """Serve a classifier over the wire protocol (reference backend loop).

    Emits the hello line, then answers predict requests until EOF.
    Malformed requests produce error objects; the loop stays alive.
    """
    w, h = classifier.input_size
    out_stream.write(json.dumps({
        "type": "hello", "classes": list(classifier.classes), "input_size": [w, h],
    }) + "\n")
    out_stream.flush()
    for line in in_stream:
        if not line.strip():
            continue
        req_id = 0
        try:
            req = json.loads(line)
            req_id = int(req.get("id", 0))
            if req.get("type") != "predict":
                raise ValueError(f"unsupported request type {req.get('type')!r}")
            images = [decode_wire_image(o) for o in req["images"]]
            for img in images:
                if img.shape[0] != h or img.shape[1] != w:
                    raise ValueError(f"image size {img.shape[1]}x{img.shape[0]} != declared {w}x{h}")
            probs = classifier.predict(images)
            out_stream.write(json.dumps({
                "type": "probs", "id": req_id, "probs": np.asarray(probs).tolist(),
            }) + "\n")
        except Exception as exc:  # keep serving after bad requests
            out_stream.write(json.dumps({"type": "error", "id": req_id, "msg": str(exc)}) + "\n")
        out_stream.flush()
