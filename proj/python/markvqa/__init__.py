"""Marker-prompted visual question answering on synthetic driving scenes."""

import json as _json

from ._markvqa import (
    Detection,
    EncoderConfig,
    MarkerControlNet,
    MarkerIndexMap,
    NumericalError,
    Point,
    QaKind,
    QARecord,
    Scene,
    SceneConfig,
    ValidationError,
    accuracy,
    assign_query_coordinate,
    bleu4,
    build_index_map,
    compute_centroid,
    corpus_bleu4,
    cosine_lr,
    extract_coords,
    format_coord,
    generate_dataset,
    generate_scene,
    index_to_coords,
    load_dataset,
    mask_average_pool,
    match_score,
    normalize_answer,
    render_marker_image,
    rouge_l,
    save_dataset,
    split_scenes,
)
from . import _markvqa


def default_config():
    """Training configuration defaults as a dict."""
    return _json.loads(_markvqa.default_config())


def evaluate_run(records, scenes):
    """Score generation records (dicts) against their scenes; returns the report dict."""
    return _json.loads(_markvqa.evaluate_run([_json.dumps(r) for r in records], scenes))


class Trainer:
    """A model for one configuration, trained and queried on lists of scenes."""

    def __init__(self, config=None, scenes=(), _impl=None):
        if _impl is None:
            merged = default_config()
            merged.update(config or {})
            _impl = _markvqa.Trainer(_json.dumps(merged), list(scenes))
        self._impl = _impl

    @classmethod
    def load(cls, path):
        return cls(_impl=_markvqa.Trainer.load(str(path)))

    @property
    def config(self):
        return _json.loads(self._impl.config)

    @property
    def iteration(self):
        return self._impl.iteration

    def trainable_names(self):
        return self._impl.trainable_names()

    def tensor(self, name):
        return self._impl.tensor(name)

    def train(self, scenes, progress=None):
        """Returns the loss curve as (iteration, lr, loss) tuples."""
        return self._impl.train(list(scenes), progress)

    def generate(self, scenes):
        return [_json.loads(r) for r in self._impl.generate(list(scenes))]

    def save(self, path):
        self._impl.save(str(path))


__all__ = [name for name in dir() if not name.startswith("_")]
