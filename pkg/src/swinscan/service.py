"""Delivery layer: JSON prediction service, PDF reports, SVG charts, CLI.

The service is stateless: weights become immutable shared state at
startup and each request owns its tensors end to end, so any permutation
of a request batch yields per-request identical responses.  Nothing a
request carries is ever written to disk; the only writes are
operator-initiated (weights, reports, plots).

Report JSON and PDF bytes are deterministic functions of their inputs.
Wall-clock time enters only through the clock callable, which honors the
SWINSCAN_TIMESTAMP variable so tests and audits can pin it.
"""

import argparse
import base64
import binascii
import hashlib
import json
import os
import re
import sys
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from importlib import resources

import numpy as np

from . import __version__
from . import data as D
from . import metrics as MX
from . import model as M
from . import segment as SEG
from . import train as TR
from .errors import (
    ConfigurationError,
    ContractError,
    EmptyInputError,
    InputError,
    PdfFormatError,
    PdfLayoutError,
    PnmError,
    SwinscanError,
)

__all__ = [
    "PredictRequest", "RequestError", "PredictionService", "parse_request",
    "build_report", "canonical_json", "write_pdf", "parse_pdf", "PdfInfo",
    "render_history_plot", "render_comparison_plot", "load_schema",
    "create_server", "default_clock", "file_digest", "main", "entry",
    "MAX_REQUEST_BYTES", "DISCLAIMER",
]

REPORT_VERSION = "1"
VALID_TASKS = ("detect", "classify", "full")
MAX_REQUEST_BYTES = 8 * 1024 * 1024
DEFAULT_PORT = 8000
DISCLAIMER = (
    "Research prototype. Not a medical device; findings require review "
    "by a qualified radiologist."
)

# accuracy figure the published comparison quotes for this approach
PUBLISHED_ACCURACY_PCT = 99.81


# ---------------------------------------------------------------------------
# requests


@dataclass(frozen=True)
class PredictRequest:
    """A decoded prediction request.

    image is the decoded picture as a 3xHxW float array in [0, 1], at
    its original resolution.  patient_ref is echoed into the report and
    never stored.
    """

    image: np.ndarray
    task: str
    pixel_spacing_mm: float | None = None
    patient_ref: str | None = None


class RequestError(SwinscanError):
    """Rejected request: carries the HTTP status and a machine-readable code."""

    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code


def parse_request(body: bytes) -> PredictRequest:
    """Decode a JSON request body; unknown fields are ignored, never fatal."""
    if len(body) > MAX_REQUEST_BYTES:
        raise RequestError(
            413, "payload_too_large",
            f"request body {len(body)} bytes exceeds the {MAX_REQUEST_BYTES} cap",
        )
    try:
        obj = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise RequestError(400, "bad_json", f"request is not valid JSON: {exc}")
    if not isinstance(obj, dict):
        raise RequestError(400, "bad_json", "request body must be a JSON object")

    task = obj.get("task")
    if task not in VALID_TASKS:
        raise RequestError(
            400, "bad_task", f"task must be one of {list(VALID_TASKS)}, got {task!r}"
        )

    encoded = obj.get("image")
    if not isinstance(encoded, str):
        raise RequestError(400, "bad_encoding", "image must be base64 text")
    try:
        raw = base64.b64decode(encoded, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise RequestError(400, "bad_encoding", f"image is not valid base64: {exc}")
    try:
        image = D.load_pnm(raw)
    except PnmError as exc:
        raise RequestError(400, "bad_image", f"image bytes are not a readable PNM: {exc}")

    spacing = obj.get("pixel_spacing_mm")
    if spacing is not None:
        if not isinstance(spacing, (int, float)) or isinstance(spacing, bool) or spacing <= 0:
            raise RequestError(
                400, "bad_spacing", f"pixel_spacing_mm must be a positive number, got {spacing!r}"
            )
        spacing = float(spacing)

    patient_ref = obj.get("patient_ref")
    if patient_ref is not None and not isinstance(patient_ref, str):
        raise RequestError(400, "bad_patient_ref", "patient_ref must be text")

    return PredictRequest(
        image=image, task=task, pixel_spacing_mm=spacing, patient_ref=patient_ref
    )


# ---------------------------------------------------------------------------
# report assembly


def default_clock() -> str:
    """UTC timestamp; SWINSCAN_TIMESTAMP overrides for reproducible output."""
    pinned = os.environ.get("SWINSCAN_TIMESTAMP")
    if pinned:
        return pinned
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def file_digest(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        digest.update(fh.read())
    return "sha256:" + digest.hexdigest()


def _round12(x) -> float:
    # fixed decimal formatting keeps serialization stable across platforms
    return float(f"{float(x):.12f}")


def _prob_block(classes, result) -> dict:
    label_id, probs = result
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (len(classes),):
        raise ContractError(
            f"expected {len(classes)} probabilities, got {list(probs.shape)}"
        )
    if not 0 <= int(label_id) < len(classes):
        raise ContractError(f"label id {label_id} outside the class range")
    return {
        "label": classes[int(label_id)],
        "probabilities": {name: _round12(p) for name, p in zip(classes, probs)},
    }


def _segmentation_block(seg: SEG.SegmentationResult) -> dict:
    return {
        "region_found": bool(seg.found),
        "area_px": int(seg.area_px),
        "area_mm2": None if seg.area_mm2 is None else _round12(seg.area_mm2),
        "bbox": None if seg.bbox is None else [int(v) for v in seg.bbox],
        "centroid": None if seg.centroid is None else [_round12(v) for v in seg.centroid],
    }


def build_report(detection, classification, segmentation, *, task,
                 model_versions, timestamp, patient_ref=None) -> dict:
    """Assemble the diagnostic report with a fixed key order.

    detection and classification are (label_id, probabilities) pairs
    from the forward pass; classification must be None unless detection
    says Yes, because a tumor subtype for a tumor-free scan is
    incoherent.
    """
    if detection is None:
        raise ContractError("a detection result is required")
    if task not in VALID_TASKS:
        raise ContractError(f"unknown task {task!r}")
    det_block = _prob_block(D.DETECT_CLASSES, detection)
    report = {
        "version": REPORT_VERSION,
        "timestamp": str(timestamp),
        "task": task,
    }
    if patient_ref is not None:
        report["patient_ref"] = patient_ref
    report["detection"] = det_block
    if classification is not None:
        if det_block["label"] != "Yes":
            raise ContractError("classification cannot accompany a No detection")
        report["classification"] = _prob_block(D.CLASSIFY_CLASSES, classification)
    report["segmentation"] = _segmentation_block(segmentation)
    report["model_versions"] = dict(model_versions)
    report["disclaimer"] = DISCLAIMER
    return report


def canonical_json(report: dict) -> bytes:
    """Compact UTF-8 encoding with insertion key order; identical
    reports serialize to identical bytes."""
    return json.dumps(report, ensure_ascii=True, separators=(",", ":")).encode("ascii")


def load_schema(name: str) -> dict:
    """Read a versioned JSON schema shipped with the package,
    e.g. load_schema("diagnostic_report.v1")."""
    path = resources.files("swinscan").joinpath("schemas", f"{name}.json")
    return json.loads(path.read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# the service


class PredictionService:
    """Loads both weight files once, then handles requests statelessly."""

    def __init__(self, detect_weights_path: str, classify_weights_path: str,
                 clock=default_clock):
        self.detect_weights = M.load_weights(detect_weights_path)
        self.classify_weights = M.load_weights(classify_weights_path)
        if self.detect_weights.config.num_classes != len(D.DETECT_CLASSES):
            raise ConfigurationError(
                f"detection weights have a {self.detect_weights.config.num_classes}-way head"
            )
        if self.classify_weights.config.num_classes != len(D.CLASSIFY_CLASSES):
            raise ConfigurationError(
                f"classification weights have a {self.classify_weights.config.num_classes}-way head"
            )
        self.model_versions = {
            "detect": file_digest(detect_weights_path),
            "classify": file_digest(classify_weights_path),
        }
        self.clock = clock

    def run(self, request: PredictRequest):
        """Full pipeline for one request: returns (report, highlighted image)."""
        side = self.detect_weights.config.image_size
        resized = np.clip(D.resize_bilinear(request.image, side), 0.0, 1.0)
        normalized = D.normalize(resized)
        _, det_probs = M.forward_classify(
            normalized, self.detect_weights.config, self.detect_weights
        )
        detection = (int(np.argmax(det_probs)), det_probs)
        classification = None
        if detection[0] == 1 and request.task in ("classify", "full"):
            _, cls_probs = M.forward_classify(
                normalized, self.classify_weights.config, self.classify_weights
            )
            classification = (int(np.argmax(cls_probs)), cls_probs)
        # segmentation stays at the original resolution: size estimates
        # on the model's downscaled grid would be meaningless
        seg = SEG.segment(SEG.rgb_from_unit(request.image), request.pixel_spacing_mm)
        report = build_report(
            detection,
            classification,
            seg,
            task=request.task,
            model_versions=self.model_versions,
            timestamp=self.clock(),
            patient_ref=request.patient_ref,
        )
        return report, seg.highlighted

    def handle_predict(self, body: bytes) -> dict:
        return self.run(parse_request(body))[0]

    def handle_report_pdf(self, body: bytes) -> bytes:
        report, highlighted = self.run(parse_request(body))
        return write_pdf(report, highlighted)

    def health(self) -> dict:
        return {
            "status": "ok",
            "version": __version__,
            "model_versions": dict(self.model_versions),
        }


# ---------------------------------------------------------------------------
# PDF writer

PAGE_WIDTH = 612
PAGE_HEIGHT = 792
PAGE_MARGIN = 72
LINE_LEADING = 14
IMAGE_BOX = (72.0, 72.0, 540.0, 470.0)  # x0, y0, x1, y1 drawing area
MAX_IMAGE_SIDE_PX = 2048  # uncompressed RGB beyond this will not fit a page budget


def _pdf_escape(text: str) -> str:
    out = text.replace("\\", r"\\").replace("(", r"\(").replace(")", r"\)")
    return "".join(ch if " " <= ch <= "~" else "?" for ch in out)


def _text_ops(lines) -> str:
    """One text object per line: (font, size, x, y, text) tuples."""
    ops = []
    for font, size, x, y, text in lines:
        ops.append(
            f"BT /{font} {size} Tf {x:.2f} {y:.2f} Td ({_pdf_escape(text)}) Tj ET"
        )
    return "\n".join(ops)


def _report_lines(report: dict):
    """Page-1 text rows and optional page-2 rows for the classification."""
    y = PAGE_HEIGHT - 52
    rows = [("F2", 16, PAGE_MARGIN, y, "Brain MRI Diagnostic Report")]
    y -= 24

    def put(text, size=10, font="F1", gap=LINE_LEADING):
        nonlocal y
        rows.append((font, size, PAGE_MARGIN, y, text))
        y -= gap

    put(f"Generated: {report['timestamp']}")
    put(f"Task: {report['task']}")
    if "patient_ref" in report:
        put(f"Patient ref: {report['patient_ref']}")
    versions = report["model_versions"]
    put(f"Detection model: {versions['detect']}", size=8)
    put(f"Classification model: {versions['classify']}", size=8)
    y -= 6

    det = report["detection"]
    put(f"Detection: {det['label']}", font="F2")
    for name, prob in det["probabilities"].items():
        put(f"  {name}: {prob:.6f}")
    y -= 6

    seg = report["segmentation"]
    if seg["region_found"]:
        put("Tumor region", font="F2")
        area = f"  Area: {seg['area_px']} px"
        if seg["area_mm2"] is not None:
            area += f" ({seg['area_mm2']:.6f} mm^2)"
        put(area)
        put(f"  Bounding box (r0, c0, r1, c1): {tuple(seg['bbox'])}")
        centroid = seg["centroid"]
        put(f"  Centroid (row, col): ({centroid[0]:.6f}, {centroid[1]:.6f})")
    else:
        put("Tumor region", font="F2")
        put("  No region found.")

    rows.append(("F1", 8, PAGE_MARGIN, 56, report["disclaimer"]))

    second = None
    if "classification" in report:
        cls = report["classification"]
        second = [("F2", 16, PAGE_MARGIN, PAGE_HEIGHT - 52, "Tumor Classification")]
        yy = PAGE_HEIGHT - 76
        second.append(("F2", 10, PAGE_MARGIN, yy, f"Type: {cls['label']}"))
        yy -= LINE_LEADING
        for name, prob in cls["probabilities"].items():
            second.append(("F1", 10, PAGE_MARGIN, yy, f"  {name}: {prob:.6f}"))
            yy -= LINE_LEADING
        second.append(("F1", 8, PAGE_MARGIN, 56, report["disclaimer"]))
    return rows, second


def _image_placement(width: int, height: int):
    x0, y0, x1, y1 = IMAGE_BOX
    scale = min((x1 - x0) / width, (y1 - y0) / height)
    draw_w, draw_h = width * scale, height * scale
    # centered horizontally, anchored to the box top
    x = x0 + ((x1 - x0) - draw_w) / 2.0
    y = y1 - draw_h
    return draw_w, draw_h, x, y


def write_pdf(report: dict, highlighted) -> bytes:
    """Serialize the report as an uncompressed single-image PDF 1.4.

    One page, or two when a classification block is present.  Streams
    are raw and fonts are built-ins, so output bytes are a pure function
    of the report content.
    """
    image = np.asarray(highlighted)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise InputError(
            f"highlighted image must be HxWx3 uint8, got {list(image.shape)} {image.dtype}"
        )
    height, width = image.shape[:2]
    if width > MAX_IMAGE_SIDE_PX or height > MAX_IMAGE_SIDE_PX:
        raise PdfLayoutError(
            f"{width}x{height} image does not fit the page budget "
            f"(max side {MAX_IMAGE_SIDE_PX} px)"
        )

    page1_lines, page2_lines = _report_lines(report)
    draw_w, draw_h, img_x, img_y = _image_placement(width, height)
    content1 = (
        _text_ops(page1_lines)
        + f"\nq {draw_w:.4f} 0 0 {draw_h:.4f} {img_x:.4f} {img_y:.4f} cm /Im1 Do Q\n"
    ).encode("latin-1")

    two_pages = page2_lines is not None
    kids = "6 0 R 8 0 R" if two_pages else "6 0 R"
    count = 2 if two_pages else 1
    resources1 = "<< /Font << /F1 3 0 R /F2 4 0 R >> /XObject << /Im1 5 0 R >> >>"
    resources2 = "<< /Font << /F1 3 0 R /F2 4 0 R >> >>"

    objects = {
        1: b"<< /Type /Catalog /Pages 2 0 R >>",
        2: f"<< /Type /Pages /Kids [{kids}] /Count {count} >>".encode("latin-1"),
        3: b"<< /Type /Font /Subtype /Type1 /BaseFont /Helvetica >>",
        4: b"<< /Type /Font /Subtype /Type1 /BaseFont /Helvetica-Bold >>",
        5: (
            f"<< /Type /XObject /Subtype /Image /Width {width} /Height {height} "
            f"/ColorSpace /DeviceRGB /BitsPerComponent 8 "
            f"/Length {width * height * 3} >>\nstream\n".encode("latin-1")
            + image.tobytes()
            + b"\nendstream"
        ),
        6: (
            f"<< /Type /Page /Parent 2 0 R /MediaBox [0 0 {PAGE_WIDTH} {PAGE_HEIGHT}] "
            f"/Resources {resources1} /Contents 7 0 R >>"
        ).encode("latin-1"),
        7: (
            f"<< /Length {len(content1)} >>\nstream\n".encode("latin-1")
            + content1
            + b"endstream"
        ),
    }
    if two_pages:
        content2 = (_text_ops(page2_lines) + "\n").encode("latin-1")
        objects[8] = (
            f"<< /Type /Page /Parent 2 0 R /MediaBox [0 0 {PAGE_WIDTH} {PAGE_HEIGHT}] "
            f"/Resources {resources2} /Contents 9 0 R >>"
        ).encode("latin-1")
        objects[9] = (
            f"<< /Length {len(content2)} >>\nstream\n".encode("latin-1")
            + content2
            + b"endstream"
        )

    out = bytearray(b"%PDF-1.4\n%\xe2\xe3\xcf\xd3\n")
    offsets = {}
    for num in sorted(objects):
        offsets[num] = len(out)
        out += f"{num} 0 obj\n".encode("latin-1")
        out += objects[num]
        out += b"\nendobj\n"
    xref_at = len(out)
    total = len(objects) + 1
    out += f"xref\n0 {total}\n".encode("latin-1")
    out += b"0000000000 65535 f \n"
    for num in sorted(objects):
        out += f"{offsets[num]:010d} 00000 n \n".encode("latin-1")
    out += (
        f"trailer\n<< /Size {total} /Root 1 0 R >>\nstartxref\n{xref_at}\n%%EOF\n"
    ).encode("latin-1")
    return bytes(out)


# ---------------------------------------------------------------------------
# PDF validating reader


@dataclass(frozen=True)
class PdfInfo:
    object_count: int
    page_count: int
    xref_offsets: dict


def parse_pdf(data: bytes) -> PdfInfo:
    """Validate framing, xref offsets and page count of an emitted PDF.

    This reads the subset of PDF 1.4 that write_pdf produces; it is the
    re-parse oracle for tests, not a general-purpose PDF parser.
    """
    if not data.startswith(b"%PDF-1.4\n"):
        raise PdfFormatError("missing %PDF-1.4 header", offset=0)
    if not data.endswith(b"%%EOF\n"):
        raise PdfFormatError("missing %%EOF trailer line", offset=len(data))

    anchor = data.rfind(b"startxref")
    if anchor < 0:
        raise PdfFormatError("missing startxref", offset=len(data))
    match = re.match(rb"startxref\n(\d+)\n", data[anchor:])
    if not match:
        raise PdfFormatError("malformed startxref block", offset=anchor)
    xref_at = int(match.group(1))
    if data[xref_at : xref_at + 5] != b"xref\n":
        raise PdfFormatError(
            f"startxref points at {xref_at}, which is not an xref table",
            offset=xref_at,
        )

    head = re.match(rb"xref\n0 (\d+)\n", data[xref_at:])
    if not head:
        raise PdfFormatError("malformed xref subsection header", offset=xref_at)
    total = int(head.group(1))
    entries_at = xref_at + head.end()
    offsets = {}
    for i in range(total):
        entry = data[entries_at + 20 * i : entries_at + 20 * (i + 1)]
        parsed = re.match(rb"(\d{10}) (\d{5}) ([fn]) \n", entry)
        if not parsed:
            raise PdfFormatError(
                f"xref entry {i} is malformed: {entry!r}", offset=entries_at + 20 * i
            )
        kind = parsed.group(3)
        if i == 0:
            if kind != b"f":
                raise PdfFormatError("xref entry 0 must be free", offset=entries_at)
            continue
        if kind != b"n":
            raise PdfFormatError(f"xref entry {i} must be in use", offset=entries_at + 20 * i)
        at = int(parsed.group(1))
        marker = f"{i} 0 obj\n".encode("latin-1")
        if data[at : at + len(marker)] != marker:
            raise PdfFormatError(
                f"xref offset {at} for object {i} does not point at it", offset=at
            )
        offsets[i] = at

    trailer_at = data.rfind(b"trailer", 0, anchor)
    if trailer_at < 0:
        raise PdfFormatError("missing trailer", offset=anchor)
    trailer = data[trailer_at:anchor]
    size = re.search(rb"/Size (\d+)", trailer)
    if not size or int(size.group(1)) != total:
        raise PdfFormatError("trailer /Size disagrees with the xref table", offset=trailer_at)
    if not re.search(rb"/Root \d+ 0 R", trailer):
        raise PdfFormatError("trailer has no /Root", offset=trailer_at)

    pages_at = data.find(b"/Type /Pages")
    if pages_at < 0:
        raise PdfFormatError("no page tree object", offset=0)
    declared = re.search(rb"/Count (\d+)", data[pages_at : data.index(b">>", pages_at)])
    if not declared:
        raise PdfFormatError("page tree lacks /Count", offset=pages_at)
    page_count = int(declared.group(1))
    actual = len(re.findall(rb"/Type /Page[^s]", data))
    if actual != page_count:
        raise PdfFormatError(
            f"declared {page_count} pages but found {actual}", offset=pages_at
        )
    return PdfInfo(object_count=total - 1, page_count=page_count, xref_offsets=offsets)


# ---------------------------------------------------------------------------
# SVG charts

_SVG_HEAD = (
    '<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
    'viewBox="0 0 {w} {h}">'
)
_SERIES_COLORS = (
    ("accuracy", "#1f77b4"),
    ("precision", "#ff7f0e"),
    ("recall", "#2ca02c"),
    ("f1", "#d62728"),
)


def render_history_plot(history) -> str:
    """Line chart of the four rate metrics against epoch, as standalone SVG."""
    history = list(history)
    if not history:
        raise EmptyInputError("no epochs to plot")
    w, h = 640, 400
    left, right, top, bottom = 60, 130, 24, 44
    plot_w, plot_h = w - left - right, h - top - bottom
    n = len(history)

    def x(i):
        return left + (plot_w / 2 if n == 1 else i * plot_w / (n - 1))

    def y(v):
        return top + (1.0 - v) * plot_h

    parts = [_SVG_HEAD.format(w=w, h=h)]
    parts.append(f'<rect width="{w}" height="{h}" fill="white"/>')
    parts.append(
        f'<text x="{left}" y="16" font-family="sans-serif" font-size="13">'
        "Training metrics by epoch</text>"
    )
    # axes and horizontal gridlines
    parts.append(
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" stroke="black"/>'
    )
    parts.append(
        f'<line x1="{left}" y1="{top + plot_h}" x2="{left + plot_w}" '
        f'y2="{top + plot_h}" stroke="black"/>'
    )
    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        ty = y(tick)
        parts.append(
            f'<line x1="{left - 4}" y1="{ty:.2f}" x2="{left + plot_w}" y2="{ty:.2f}" '
            'stroke="#dddddd"/>'
        )
        parts.append(
            f'<text x="{left - 8}" y="{ty + 4:.2f}" text-anchor="end" '
            f'font-family="sans-serif" font-size="10">{tick:g}</text>'
        )
    for i, em in enumerate(history):
        parts.append(
            f'<text x="{x(i):.2f}" y="{top + plot_h + 16}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="10">{em.epoch}</text>'
        )
    for row, (name, color) in enumerate(_SERIES_COLORS):
        points = " ".join(
            f"{x(i):.2f},{y(getattr(em, name)):.2f}" for i, em in enumerate(history)
        )
        parts.append(
            f'<polyline points="{points}" fill="none" stroke="{color}" stroke-width="2"/>'
        )
        ly = top + 12 + row * 16
        parts.append(
            f'<line x1="{left + plot_w + 12}" y1="{ly}" x2="{left + plot_w + 32}" '
            f'y2="{ly}" stroke="{color}" stroke-width="2"/>'
        )
        parts.append(
            f'<text x="{left + plot_w + 38}" y="{ly + 4}" font-family="sans-serif" '
            f'font-size="11">{name}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts)


def render_comparison_plot(report: MX.MetricsReport | None = None) -> str:
    """Bar chart of accuracy per algorithm from the published comparison.

    The final bar is this model, visually distinguished; without a
    report it carries the published accuracy figure.
    """
    bars = []
    for name, _, _, accuracy in MX.COMPARISON_REFERENCE:
        bars.append((name, float(accuracy.rstrip("%")), accuracy.rstrip("%")))
    if report is None:
        own = PUBLISHED_ACCURACY_PCT
        own_label = f"{own:g}"
    else:
        if report.accuracy is None:
            raise InputError("report accuracy is undefined; nothing to plot")
        own = report.accuracy * 100.0
        own_label = MX.render_percent(report.accuracy)
    bars.append(("Our Approach", own, own_label))

    w, h = 640, 400
    left, right, top, bottom = 60, 20, 30, 86
    plot_w, plot_h = w - left - right, h - top - bottom
    slot = plot_w / len(bars)

    parts = [_SVG_HEAD.format(w=w, h=h)]
    parts.append(f'<rect width="{w}" height="{h}" fill="white"/>')
    parts.append(
        f'<text x="{left}" y="18" font-family="sans-serif" font-size="13">'
        "Accuracy by algorithm</text>"
    )
    parts.append(
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" stroke="black"/>'
    )
    parts.append(
        f'<line x1="{left}" y1="{top + plot_h}" x2="{left + plot_w}" '
        f'y2="{top + plot_h}" stroke="black"/>'
    )
    for tick in (0, 25, 50, 75, 100):
        ty = top + (1.0 - tick / 100.0) * plot_h
        parts.append(
            f'<text x="{left - 8}" y="{ty + 4:.2f}" text-anchor="end" '
            f'font-family="sans-serif" font-size="10">{tick}</text>'
        )
    for i, (name, value, label) in enumerate(bars):
        final = i == len(bars) - 1
        bar_w = slot * 0.7
        bx = left + i * slot + (slot - bar_w) / 2.0
        bar_h = value / 100.0 * plot_h
        by = top + plot_h - bar_h
        fill = "#d62728" if final else "#7f7f7f"
        extra = ' class="own"' if final else ""
        parts.append(
            f'<rect{extra} x="{bx:.2f}" y="{by:.2f}" width="{bar_w:.2f}" '
            f'height="{bar_h:.2f}" fill="{fill}"/>'
        )
        parts.append(
            f'<text x="{bx + bar_w / 2:.2f}" y="{by - 4:.2f}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="10">{label}</text>'
        )
        lx, ly = left + i * slot + slot / 2.0, top + plot_h + 14
        parts.append(
            f'<text x="{lx:.2f}" y="{ly:.2f}" text-anchor="end" '
            f'font-family="sans-serif" font-size="10" '
            f'transform="rotate(-40 {lx:.2f} {ly:.2f})">{name}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts)


# ---------------------------------------------------------------------------
# HTTP server


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "swinscan/" + __version__

    def log_message(self, format, *args):
        # requests are never persisted, not even as access log lines
        pass

    def _send(self, status: int, content_type: str, body: bytes, close=False):
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        if close:
            self.send_header("Connection", "close")
        self.end_headers()
        self.wfile.write(body)
        if close:
            self.close_connection = True

    def _send_json(self, status: int, obj: dict, close=False):
        self._send(status, "application/json", canonical_json(obj), close=close)

    def _send_error_json(self, status: int, code: str, message: str, close=False):
        self._send_json(
            status, {"error": {"code": code, "message": message}}, close=close
        )

    def _read_body(self):
        try:
            length = int(self.headers.get("Content-Length", "0") or "0")
        except ValueError:
            self._send_error_json(400, "bad_request", "invalid Content-Length", close=True)
            return None
        if length > MAX_REQUEST_BYTES:
            # drain what the client is mid-send so the refusal can be
            # delivered, then drop the connection
            remaining = min(length, 8 * MAX_REQUEST_BYTES)
            while remaining > 0:
                chunk = self.rfile.read(min(65536, remaining))
                if not chunk:
                    break
                remaining -= len(chunk)
            self._send_error_json(
                413, "payload_too_large",
                f"request body {length} bytes exceeds the {MAX_REQUEST_BYTES} cap",
                close=True,
            )
            return None
        return self.rfile.read(length)

    def do_POST(self):
        body = self._read_body()
        if body is None:
            return
        try:
            if self.path == "/v1/predict":
                report = self.server.service.handle_predict(body)
                self._send_json(200, report)
            elif self.path == "/v1/report.pdf":
                pdf = self.server.service.handle_report_pdf(body)
                self._send(200, "application/pdf", pdf)
            else:
                self._send_error_json(404, "not_found", f"no route {self.path}")
        except RequestError as exc:
            self._send_error_json(exc.status, exc.code, str(exc))
        except PdfLayoutError as exc:
            self._send_error_json(400, "layout", str(exc))
        except SwinscanError as exc:
            self._send_error_json(400, "bad_request", str(exc))

    def do_GET(self):
        if self.path == "/v1/health":
            self._send_json(200, self.server.service.health())
        else:
            self._send_error_json(404, "not_found", f"no route {self.path}")


def create_server(service: PredictionService, port: int = 0,
                  host: str = "127.0.0.1") -> ThreadingHTTPServer:
    """Bound but not yet serving; port 0 picks a free one."""
    server = ThreadingHTTPServer((host, port), _Handler)
    server.service = service
    return server


def resolve_port(flag_value) -> int:
    """--port wins over SWINSCAN_PORT; default otherwise."""
    if flag_value is not None:
        return int(flag_value)
    env = os.environ.get("SWINSCAN_PORT")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigurationError(f"SWINSCAN_PORT is not an integer: {env!r}")
    return DEFAULT_PORT


# ---------------------------------------------------------------------------
# CLI


def _task_samples(manifest_path: str, task: str):
    manifest = D.load_manifest(manifest_path)
    entries = [e for e in manifest.entries if e.task == task]
    if not entries:
        raise EmptyInputError(f"manifest has no {task!r} entries")
    return D.load_dataset(manifest, entries)


def _cmd_train(args) -> int:
    config = TR.TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        weight_decay=args.weight_decay,
        seed=args.seed,
    )
    samples = _task_samples(args.manifest, args.task)
    classes = len(D.classes_for_task(args.task))
    weights = M.ModelWeights.init(M.default_config(classes), seed=args.seed)
    weights, history = TR.train(weights, samples, config)
    TR.save_weights(args.out, weights)
    if args.log:
        TR.log_epoch_metrics(history, args.log)
    print(json.dumps({"weights": args.out, "final_epoch": asdict(history[-1])}))
    return 0


def _cmd_eval(args) -> int:
    weights = TR.load_weights(args.weights)
    task = D.TASK_DETECT if weights.config.num_classes == 2 else D.TASK_CLASSIFY
    samples = _task_samples(args.manifest, task)
    _, report = TR.evaluate(weights, samples)
    print(json.dumps(report.as_dict(), indent=2))
    return 0


def _cmd_predict(args) -> int:
    service = PredictionService(args.weights_detect, args.weights_classify)
    with open(args.image, "rb") as fh:
        raw = fh.read()
    body = {"image": base64.b64encode(raw).decode("ascii"), "task": args.task}
    if args.spacing is not None:
        body["pixel_spacing_mm"] = args.spacing
    if args.patient_ref is not None:
        body["patient_ref"] = args.patient_ref
    request = parse_request(json.dumps(body).encode("utf-8"))
    report, highlighted = service.run(request)
    if args.pdf:
        with open(args.pdf, "wb") as fh:
            fh.write(write_pdf(report, highlighted))
    sys.stdout.write(canonical_json(report).decode("ascii") + "\n")
    return 0


def _cmd_serve(args) -> int:
    service = PredictionService(args.weights_detect, args.weights_classify)
    server = create_server(service, resolve_port(args.port))
    host, port = server.server_address[:2]
    print(f"serving on http://{host}:{port}", file=sys.stderr)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def _cmd_plot(args) -> int:
    if args.history:
        svg = render_history_plot(TR.read_epoch_metrics(args.history))
    else:
        svg = render_comparison_plot()
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(svg + "\n")
    return 0


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage problems; this tool reserves 2 for data
    # errors, so usage failures are rerouted to exit 1
    def error(self, message):
        raise _UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="swinscan", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command")

    train = sub.add_parser("train", help="fit a model on a manifest dataset")
    train.add_argument("--task", required=True, choices=[D.TASK_DETECT, D.TASK_CLASSIFY])
    train.add_argument("--manifest", required=True)
    train.add_argument("--out", required=True, help="weight file to write")
    train.add_argument("--seed", type=int, default=0)
    train.add_argument("--epochs", type=int, default=3)
    train.add_argument("--batch-size", type=int, default=32)
    train.add_argument("--lr", type=float, default=3e-4)
    train.add_argument("--weight-decay", type=float, default=0.01)
    train.add_argument("--log", help="optional epoch metrics CSV")
    train.set_defaults(func=_cmd_train)

    evaluate = sub.add_parser("eval", help="nine-measure report on a manifest")
    evaluate.add_argument("--weights", required=True)
    evaluate.add_argument("--manifest", required=True)
    evaluate.set_defaults(func=_cmd_eval)

    predict = sub.add_parser("predict", help="diagnose one image, write a PDF")
    predict.add_argument("--weights-detect", required=True)
    predict.add_argument("--weights-classify", required=True)
    predict.add_argument("--image", required=True, help="PNM image file")
    predict.add_argument("--pdf", help="report PDF to write")
    predict.add_argument("--task", default="full", choices=list(VALID_TASKS))
    predict.add_argument("--spacing", type=float, help="pixel spacing in mm")
    predict.add_argument("--patient-ref")
    predict.set_defaults(func=_cmd_predict)

    serve = sub.add_parser("serve", help="run the JSON-over-HTTP service")
    serve.add_argument("--weights-detect", required=True)
    serve.add_argument("--weights-classify", required=True)
    serve.add_argument("--port", type=int, default=None,
                       help=f"default: SWINSCAN_PORT or {DEFAULT_PORT}")
    serve.set_defaults(func=_cmd_serve)

    plot = sub.add_parser("plot", help="render an SVG chart")
    which = plot.add_mutually_exclusive_group(required=True)
    which.add_argument("--history", help="epoch metrics CSV to chart")
    which.add_argument("--comparison", action="store_true",
                       help="published accuracy comparison bars")
    plot.add_argument("--out", required=True)
    plot.set_defaults(func=_cmd_plot)
    return parser


def main(argv=None) -> int:
    """Exit 0 on success, 1 on usage errors, 2 on data errors."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"swinscan: error: {exc}", file=sys.stderr)
        return 1
    if getattr(args, "command", None) is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args)
    except (SwinscanError, OSError) as exc:
        print(f"swinscan: error: {exc}", file=sys.stderr)
        return 2


def entry():
    raise SystemExit(main())


if __name__ == "__main__":
    entry()
