"""Model files: a JSON envelope line followed by DenseNet text blocks.

Layout::

    svdonet-model 1
    envelope {"variant": ..., "models": [...], ...}
    <dense-net block> ...          (one per entry of every model's "nets")
    end-model

Floats in the envelope are written with ``repr`` precision and net blocks
with 17 significant digits, so a save/load round trip is exact and two
identical models produce byte-identical files.
"""

import json

import numpy as np

from .exceptions import ParseError
from .nn import _LineReader, read_net, write_net
from .operators import (
    FlexDeepONet,
    FlexModel,
    PODDeepONet,
    PreNet,
    SVDAssembly,
    SVDDeepONet,
    VanillaDeepONet,
    VanillaModel,
)

__all__ = ["save_model", "load_model", "model_to_envelope"]

_MAGIC = "svdonet-model"
_VERSION = 1

_ESTIMATORS = {
    "VanillaDeepONet": VanillaDeepONet,
    "PODDeepONet": PODDeepONet,
    "SVDDeepONet": SVDDeepONet,
    "FlexDeepONet": FlexDeepONet,
}
_TUPLE_PARAMS = ("branch_hidden", "trunk_hidden", "prenet_hidden", "prenet_components")


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return [_jsonable(x) for x in v.tolist()]
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, np.generic):
        return v.item()
    return v


def _core_meta(model):
    """Envelope entry and ordered net list for one core model."""
    if isinstance(model, VanillaModel):
        meta = dict(variant="vanilla", n_vars=model.n_vars, n_branch_inputs=model.n_branch_inputs,
                    b0=model.b0, target_shift=model.target_shift,
                    target_scale=model.target_scale, trainable=list(model.trainable))
        nets = model.branches + model.trunks
    elif isinstance(model, FlexModel):
        pn = model.prenet
        meta = dict(variant="flex", n_vars=model.n_vars, n_branch_inputs=model.n_branch_inputs,
                    frame_shift=model.frame_shift, frame_scale=model.frame_scale,
                    target_shift=model.target_shift, target_scale=model.target_scale,
                    prenet=dict(components=list(pn.components), n_coords=pn.n_coords,
                                n_sets=pn.n_sets, slots=pn.slots, n_nets=len(pn.nets)))
        nets = pn.nets + model.branches + model.trunks
    elif isinstance(model, SVDAssembly):
        meta = dict(variant="svd", n_vars=model.n_vars, n_branch_inputs=model.n_branch_inputs,
                    groups=model.groups, n_trunks=len(model.trunks))
        nets = model.trunks + model.branches
    else:
        raise TypeError(f"cannot serialise {type(model).__name__}")
    meta["n_nets"] = len(nets)
    return _jsonable(meta), nets


def _core_from_meta(meta, nets):
    v = meta["variant"]
    nv = meta["n_vars"]
    if v == "vanilla":
        return VanillaModel(nets[:nv], nets[nv:], np.array(meta["b0"]), meta["n_branch_inputs"],
                            np.array(meta["target_shift"]), np.array(meta["target_scale"]),
                            tuple(meta["trainable"]))
    if v == "flex":
        p = meta["prenet"]
        k = p["n_nets"]
        prenet = PreNet(nets[:k], p["slots"], tuple(p["components"]), p["n_coords"], p["n_sets"])
        return FlexModel(prenet, nets[k:k + nv], nets[k + nv:], meta["n_branch_inputs"],
                         np.array(meta["frame_shift"]), meta["frame_scale"],
                         np.array(meta["target_shift"]), np.array(meta["target_scale"]))
    if v == "svd":
        t = meta["n_trunks"]
        return SVDAssembly(nets[:t], nets[t:], meta["groups"], meta["n_branch_inputs"])
    raise ParseError(f"unknown model variant {v!r}")


def model_to_envelope(obj, metadata=None):
    """Return ``(envelope dict, nets)`` for an estimator or a core model."""
    env = {"metadata": _jsonable(metadata or {})}
    if isinstance(obj, tuple(_ESTIMATORS.values())):
        models = obj.models_
        env.update(
            kind="estimator",
            estimator=type(obj).__name__,
            variant={"VanillaDeepONet": "vanilla", "PODDeepONet": "pod",
                     "SVDDeepONet": "svd", "FlexDeepONet": "flex"}[type(obj).__name__],
            params=_jsonable(obj.get_params()),
            n_features_in=int(obj.n_features_in_),
            n_outputs=int(obj.n_outputs_),
            y_1d=bool(obj._y_1d),
            groups=_jsonable(obj.groups_),
            p=int(obj.p_),
            param_count=int(obj.param_count_),
        )
        if isinstance(obj, SVDDeepONet) and hasattr(obj, "decompositions_"):
            env["preprocessing"] = [
                dict(group=d["group"], c=d["preprocessing"].c, d=d["preprocessing"].d,
                     center=d["preprocessing"].center_method,
                     scale=d["preprocessing"].scale_method,
                     sigma=d["decomposition"].sigma)
                for d in obj.decompositions_
            ]
            env["preprocessing"] = _jsonable(env["preprocessing"])
        elif hasattr(obj, "preprocessing_"):
            env["preprocessing"] = obj.preprocessing_
    else:
        models = [obj]
        env.update(kind="model", variant=obj.variant, p=int(obj.p),
                   param_count=int(obj.param_count))
    env["models"], nets = [], []
    for m in models:
        meta, mnets = _core_meta(m)
        env["models"].append(meta)
        nets.extend(mnets)
    return env, nets


def save_model(obj, path, metadata=None):
    """Write a fitted estimator or core model to ``path``.

    ``metadata`` (JSON-serialisable) is stored verbatim, e.g. the data
    manifest the model was trained on.
    """
    env, nets = model_to_envelope(obj, metadata)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{_MAGIC} {_VERSION}\n")
        fh.write("envelope " + json.dumps(env, sort_keys=True) + "\n")
        for net in nets:
            write_net(net, fh)
        fh.write("end-model\n")


def read_envelope(path):
    """Only the envelope of a model file (cheap; nets are not parsed)."""
    with open(path, encoding="utf-8") as fh:
        r = _LineReader(fh, str(path))
        _check_head(r)
        return _parse_envelope(r)


def _check_head(r):
    head = r.tokens()
    if len(head) != 2 or head[0] != _MAGIC:
        raise ParseError("not a svdonet model file", r.lineno, r.path)
    if head[1] != str(_VERSION):
        raise ParseError(f"unsupported model format version {head[1]}", r.lineno, r.path)


def _parse_envelope(r):
    line = r.next()
    if not line.startswith("envelope "):
        raise ParseError("expected 'envelope'", r.lineno, r.path)
    try:
        return json.loads(line[len("envelope "):])
    except json.JSONDecodeError as exc:
        raise ParseError(f"bad envelope: {exc}", r.lineno, r.path) from None


def load_model(path):
    """Read a file written by :func:`save_model`.

    Returns the fitted estimator (or core model) with ``metadata_`` / a
    ``metadata`` attribute holding the stored metadata.
    """
    with open(path, encoding="utf-8") as fh:
        r = _LineReader(fh, str(path))
        _check_head(r)
        env = _parse_envelope(r)
        models = []
        for meta in env["models"]:
            nets = [read_net(fh, reader=r) for _ in range(meta["n_nets"])]
            models.append(_core_from_meta(meta, nets))
        r.tokens("end-model")
    if env["kind"] == "model":
        m = models[0]
        m.metadata = env["metadata"]
        return m
    cls = _ESTIMATORS[env["estimator"]]
    params = dict(env["params"])
    for key in _TUPLE_PARAMS:
        if key in params and isinstance(params[key], list):
            params[key] = tuple(params[key])
    lr = params.get("learning_rate")
    if isinstance(lr, list):
        params["learning_rate"] = [tuple(e) for e in lr]
    est = cls(**params)
    est.models_ = models
    est.groups_ = env["groups"]
    est.n_features_in_ = env["n_features_in"]
    est.n_outputs_ = env["n_outputs"]
    est._y_1d = env["y_1d"]
    if "preprocessing" in env:
        est.preprocessing_ = env["preprocessing"]
    est.metadata_ = env["metadata"]
    return est
