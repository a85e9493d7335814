"""Single-image inference shared by the CLI and the inline service."""

import numpy as np

from . import autodiff as ad
from .heatmap import DEFAULT_TAU, HeatmapStack, LAX_VIEWS, VIEWS, decode, to_original_frame
from .measure import lv_length
from .preprocess import preprocess_pipeline
from .unet import load_checkpoint


def load_model(checkpoint_path):
    """Load a checkpoint; returns (model, frame, sigma) from its provenance."""
    ckpt = load_checkpoint(checkpoint_path)
    prov = ckpt.provenance
    frame = tuple(prov.get("frame", (400, 400)))
    sigma = float(prov.get("sigma_px", 5.0))
    return ckpt.to_model(), frame, sigma


def infer_image(model, image, view, frame, tau=DEFAULT_TAU):
    """Preprocess -> eval forward -> decode -> map back to the original frame.

    Returns (LandmarkSet in original coordinates, lv_length_mm or None).
    """
    framed, record = preprocess_pipeline(image, out_size=frame)
    x = framed.pixels[None, None, :, :]
    scores = model.forward(ad.Tensor(x, dtype=np.float32), mode="eval")
    probs = ad.softmax_channels(scores).data[0]
    proc = decode(HeatmapStack(probs, 0.0), tau=tau, view=view)
    landmarks = to_original_frame(proc, record)
    length = None
    if view in LAX_VIEWS and all(landmarks.present(s) for s in VIEWS[view]):
        length = lv_length(landmarks)
    return landmarks, length


def landmarks_to_json(landmarks, lv_length_mm=None, image_name=None):
    doc = {
        "view": landmarks.view,
        "frame": list(landmarks.frame),
        "spacing_mm": list(landmarks.spacing_mm),
        "landmarks": {
            s: (None if landmarks.points[s] is None
                else {"x": landmarks.points[s][0], "y": landmarks.points[s][1]})
            for s in landmarks.slots
        },
        "lv_length_mm": lv_length_mm,
    }
    if image_name is not None:
        doc["image"] = image_name
    return doc


def landmarks_from_json(doc):
    from .heatmap import LandmarkSet

    view = doc["view"]
    pts = {}
    for s in VIEWS[view]:
        p = doc["landmarks"].get(s)
        pts[s] = None if p is None else (float(p["x"]), float(p["y"]))
    return LandmarkSet(view, pts, tuple(doc["frame"]), tuple(doc["spacing_mm"]))
