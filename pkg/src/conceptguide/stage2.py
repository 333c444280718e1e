"""Stage 2: inspectable classifiers from concept logits to diseases.

Linear kinds (logistic regression, linear SVM) expose their weight matrix
for attribution; the random forest scores with the exact per-tree vote
fraction; the MLP is the non-interpretable baseline. All kinds fit
one-vs-rest per disease over the same input matrix."""

from __future__ import annotations

import json
import pickle
from dataclasses import dataclass, field

import numpy as np
import torch
from sklearn.ensemble import RandomForestClassifier
from sklearn.linear_model import LogisticRegression
from sklearn.svm import LinearSVC

from .data import LabelSpace
from .errors import ConfigurationError, ContractViolation, UnsupportedOperationError
from .stage1 import ConceptLogits

KIND_LR = "logistic_regression"
KIND_SVM = "linear_svm"
KIND_RF = "random_forest"
KIND_MLP = "mlp"
KINDS = (KIND_LR, KIND_SVM, KIND_RF, KIND_MLP)
LINEAR_KINDS = (KIND_LR, KIND_SVM)

MODES = ("single_label", "multi_label")
INPUT_SPACES = ("scores", "probabilities")

KIND_ALIASES = {"lr": KIND_LR, "svm": KIND_SVM, "rf": KIND_RF, "mlp": KIND_MLP}

DEFAULT_HYPER = {
    "C": 1.0,
    "n_trees": 100,
    "hidden": 64,
    "mlp_epochs": 200,
    "mlp_lr": 0.05,
    "seed": 0,
}

# Bias magnitude for degenerate all-positive heads; sigmoid(50) is 1.0 to
# double precision without overflowing anything downstream.
_SATURATED_BIAS = 50.0


class _ConstantVoteTree:
    """Stands in for a decision tree when every training label agrees."""

    def __init__(self, label: int):
        self.label = int(label)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.full(x.shape[0], self.label, dtype=np.int64)


class _DecodedTree:
    """Wraps a fitted sklearn tree so predict() returns 0/1 disease votes
    rather than forest-internal class indices."""

    def __init__(self, tree, classes: np.ndarray):
        self.tree = tree
        self.classes = np.asarray(classes)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.classes[self.tree.predict(x).astype(int)]


@dataclass
class DiseasePrediction:
    image_id: str
    scores: np.ndarray  # length K, disease order of the fitted model
    decision: object  # disease name (single_label) or frozenset of names


@dataclass
class Stage2Model:
    kind: str
    mode: str
    diseases: tuple[str, ...]
    e: int
    label_space_digest: str
    input_space: str
    hyper: dict
    heads: dict
    warnings: list[str] = field(default_factory=list)

    @property
    def K(self) -> int:
        return len(self.diseases)


def _design_matrix(logits: list[ConceptLogits], e: int, input_space: str) -> np.ndarray:
    rows = []
    for row in logits:
        if row.E != e:
            raise ContractViolation(f"logits row {row.image_id!r} has E={row.E}, model expects E={e}")
        rows.append(row.probabilities if input_space == "probabilities" else row.scores)
    return np.asarray(rows, dtype=np.float64)


def _binary_targets(logits: list[ConceptLogits], labels: dict, disease: str) -> np.ndarray:
    y = np.zeros(len(logits), dtype=np.int64)
    for i, row in enumerate(logits):
        sample_labels = labels.get(row.image_id)
        if sample_labels is None:
            raise ContractViolation(f"no label for image {row.image_id!r}")
        y[i] = 1 if disease in sample_labels else 0
    return y


def _fit_mlp(x: np.ndarray, y: np.ndarray, mode: str, hyper: dict) -> dict:
    """One hidden layer, cross-entropy objective: softmax for single-label
    targets, per-disease sigmoid for multi-label."""
    torch.manual_seed(int(hyper["seed"]))
    n, e = x.shape
    k = y.shape[1]
    hidden = int(hyper["hidden"])
    xt = torch.as_tensor(x, dtype=torch.float64)
    yt = torch.as_tensor(y, dtype=torch.float64)
    w1 = torch.randn(hidden, e, dtype=torch.float64, requires_grad=True)
    b1 = torch.zeros(hidden, dtype=torch.float64, requires_grad=True)
    w2 = torch.randn(k, hidden, dtype=torch.float64, requires_grad=True)
    b2 = torch.zeros(k, dtype=torch.float64, requires_grad=True)
    with torch.no_grad():
        w1 *= (2.0 / e) ** 0.5
        w2 *= (2.0 / hidden) ** 0.5
    optimizer = torch.optim.Adam([w1, b1, w2, b2], lr=float(hyper["mlp_lr"]))
    for _ in range(int(hyper["mlp_epochs"])):
        optimizer.zero_grad()
        out = torch.tanh(xt @ w1.T + b1) @ w2.T + b2
        if mode == "single_label":
            loss = torch.nn.functional.cross_entropy(out, yt.argmax(dim=1))
        else:
            loss = torch.nn.functional.binary_cross_entropy_with_logits(out, yt)
        loss.backward()
        optimizer.step()
    return {
        "w1": w1.detach().numpy(),
        "b1": b1.detach().numpy(),
        "w2": w2.detach().numpy(),
        "b2": b2.detach().numpy(),
    }


def _mlp_scores(head: dict, x: np.ndarray, mode: str) -> np.ndarray:
    hidden = np.tanh(x @ head["w1"].T + head["b1"])
    out = hidden @ head["w2"].T + head["b2"]
    if mode == "single_label":
        shifted = out - out.max(axis=1, keepdims=True)
        expd = np.exp(shifted)
        return expd / expd.sum(axis=1, keepdims=True)
    return 1.0 / (1.0 + np.exp(-out))


def fit(
    kind: str,
    logits: list[ConceptLogits],
    labels: dict,
    label_space: LabelSpace,
    mode: str = "single_label",
    hyper: dict | None = None,
    input_space: str = "scores",
) -> Stage2Model:
    kind = KIND_ALIASES.get(kind, kind)
    if kind not in KINDS:
        raise ConfigurationError(f"stage-2 kind must be one of {KINDS} (or {sorted(KIND_ALIASES)})")
    if mode not in MODES:
        raise ConfigurationError(f"mode must be one of {MODES}")
    if input_space not in INPUT_SPACES:
        raise ConfigurationError(f"input_space must be one of {INPUT_SPACES}")
    if not logits:
        raise ContractViolation("cannot fit on an empty logits list")
    merged = dict(DEFAULT_HYPER)
    merged.update(hyper or {})
    e = logits[0].E
    x = _design_matrix(logits, e, input_space)

    heads: dict = {}
    warnings: list[str] = []

    if kind == KIND_MLP:
        y = np.stack([_binary_targets(logits, labels, d) for d in label_space.diseases], axis=1)
        if mode == "single_label" and not (y.sum(axis=1) == 1).all():
            raise ContractViolation("single_label mode requires exactly one disease per sample")
        heads["mlp"] = _fit_mlp(x, y, mode, merged)
    else:
        for disease in label_space.diseases:
            y = _binary_targets(logits, labels, disease)
            positives = int(y.sum())
            if positives == 0:
                if mode == "multi_label":
                    warnings.append(f"disease {disease!r} has no positive examples; head skipped")
                    heads[disease] = None
                    continue
                raise ContractViolation(
                    f"disease {disease!r} has no positive examples in single_label mode"
                )
            if positives == len(y):
                warnings.append(f"disease {disease!r} has no negative examples; head saturated")
                if kind == KIND_RF:
                    heads[disease] = {"trees": [_ConstantVoteTree(1)]}
                else:
                    heads[disease] = {"w": np.zeros(e), "b": _SATURATED_BIAS}
                continue
            if kind == KIND_LR:
                clf = LogisticRegression(C=float(merged["C"]), solver="lbfgs", max_iter=2000)
                clf.fit(x, y)
                heads[disease] = {"w": clf.coef_[0].copy(), "b": float(clf.intercept_[0])}
            elif kind == KIND_SVM:
                clf = LinearSVC(
                    C=float(merged["C"]), loss="hinge", max_iter=20000,
                    random_state=int(merged["seed"]),
                )
                clf.fit(x, y)
                heads[disease] = {"w": clf.coef_[0].copy(), "b": float(clf.intercept_[0])}
            else:
                forest = RandomForestClassifier(
                    n_estimators=int(merged["n_trees"]),
                    bootstrap=True,
                    random_state=int(merged["seed"]),
                )
                forest.fit(x, y)
                heads[disease] = {
                    "trees": [_DecodedTree(t, forest.classes_) for t in forest.estimators_]
                }

    return Stage2Model(
        kind=kind,
        mode=mode,
        diseases=label_space.diseases,
        e=e,
        label_space_digest=label_space.digest,
        input_space=input_space,
        hyper=merged,
        heads=heads,
        warnings=warnings,
    )


def from_linear_parameters(
    kind: str,
    weights: np.ndarray,
    biases: np.ndarray,
    diseases: tuple[str, ...],
    mode: str = "single_label",
    label_space_digest: str = "manual",
    input_space: str = "scores",
) -> Stage2Model:
    """Hand-built linear model; the closed-form path used by equation
    oracles and by the zero-shot bank-prior head."""
    kind = KIND_ALIASES.get(kind, kind)
    if kind not in LINEAR_KINDS:
        raise ConfigurationError("from_linear_parameters supports linear kinds only")
    weights = np.asarray(weights, dtype=np.float64)
    biases = np.asarray(biases, dtype=np.float64)
    if weights.shape != (len(diseases), weights.shape[1]) or biases.shape != (len(diseases),):
        raise ContractViolation("weights must be K x E and biases length K")
    heads = {d: {"w": weights[i].copy(), "b": float(biases[i])} for i, d in enumerate(diseases)}
    return Stage2Model(
        kind=kind,
        mode=mode,
        diseases=tuple(diseases),
        e=int(weights.shape[1]),
        label_space_digest=label_space_digest,
        input_space=input_space,
        hyper={},
        heads=heads,
    )


def from_tree_votes(
    votes: dict, diseases: tuple[str, ...], e: int, mode: str = "single_label"
) -> Stage2Model:
    """Forest model from fixed per-tree votes, e.g. {"d": [1, 0, 1]}."""
    heads = {d: {"trees": [_ConstantVoteTree(v) for v in votes[d]]} for d in diseases}
    return Stage2Model(
        kind=KIND_RF,
        mode=mode,
        diseases=tuple(diseases),
        e=e,
        label_space_digest="manual",
        input_space="scores",
        hyper={},
        heads=heads,
    )


def _score_matrix(model: Stage2Model, x: np.ndarray) -> np.ndarray:
    n = x.shape[0]
    if model.kind == KIND_MLP:
        return _mlp_scores(model.heads["mlp"], x, model.mode)
    scores = np.zeros((n, model.K))
    for i, disease in enumerate(model.diseases):
        head = model.heads[disease]
        if head is None:
            scores[:, i] = -np.inf if model.kind == KIND_SVM else 0.0
            continue
        if model.kind == KIND_RF:
            votes = np.stack([tree.predict(x) for tree in head["trees"]])
            scores[:, i] = votes.mean(axis=0)
        else:
            margin = x @ head["w"] + head["b"]
            if model.kind == KIND_LR:
                scores[:, i] = 1.0 / (1.0 + np.exp(-margin))
            else:
                scores[:, i] = margin
    return scores


def predict(model: Stage2Model, logits: list[ConceptLogits]) -> list[DiseasePrediction]:
    """Per-kind scores: LR sigmoid probabilities, SVM margins, RF vote
    fractions, MLP softmax/sigmoid. single_label decides by argmax;
    multi_label thresholds at probability 0.5 or margin 0."""
    if logits and logits[0].E != model.e:
        raise ContractViolation(
            f"logits have E={logits[0].E} but model {model.label_space_digest} expects E={model.e}"
        )
    x = _design_matrix(logits, model.e, model.input_space)
    scores = _score_matrix(model, x)
    out = []
    for i, row in enumerate(logits):
        vec = scores[i]
        if model.mode == "single_label":
            decision = model.diseases[int(np.argmax(vec))]
        else:
            cut = 0.0 if model.kind == KIND_SVM else 0.5
            decision = frozenset(d for j, d in enumerate(model.diseases) if vec[j] >= cut)
        out.append(DiseasePrediction(image_id=row.image_id, scores=vec.copy(), decision=decision))
    return out


def concept_weights(model: Stage2Model) -> np.ndarray:
    """K x E fitted weights; rows follow disease order, columns concept
    order."""
    if model.kind not in LINEAR_KINDS:
        raise UnsupportedOperationError(
            f"concept weights are only defined for linear kinds, not {model.kind}; "
            "surrogate explanations for trees/MLP are out of scope"
        )
    matrix = np.zeros((model.K, model.e))
    for i, disease in enumerate(model.diseases):
        head = model.heads[disease]
        if head is not None:
            matrix[i] = head["w"]
    return matrix


def save_model(model: Stage2Model, path) -> None:
    """JSON header line + parameters: dense float32 matrices for linear
    kinds and the MLP, pickled trees for the forest."""
    header = {
        "kind": model.kind,
        "mode": model.mode,
        "K": model.K,
        "E": model.e,
        "diseases": list(model.diseases),
        "label_space_digest": model.label_space_digest,
        "input_space": model.input_space,
        "hyper": model.hyper,
        "warnings": model.warnings,
        "skipped": sorted(d for d, h in model.heads.items() if h is None),
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        if model.kind in LINEAR_KINDS:
            weights = concept_weights(model).astype(np.float32)
            biases = np.array(
                [model.heads[d]["b"] if model.heads[d] else 0.0 for d in model.diseases],
                dtype=np.float32,
            )
            fh.write(weights.tobytes(order="C"))
            fh.write(biases.tobytes())
        elif model.kind == KIND_MLP:
            head = model.heads["mlp"]
            dims = np.array(
                [head["w1"].shape[0], head["w1"].shape[1], head["w2"].shape[0]], dtype=np.int64
            )
            fh.write(dims.tobytes())
            for key in ("w1", "b1", "w2", "b2"):
                fh.write(head[key].astype(np.float32).tobytes(order="C"))
        else:
            pickle.dump(model.heads, fh, protocol=4)


def load_model(path) -> Stage2Model:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        kind = header["kind"]
        k, e = int(header["K"]), int(header["E"])
        diseases = tuple(header["diseases"])
        skipped = set(header.get("skipped", []))
        if kind in LINEAR_KINDS:
            weights = np.frombuffer(fh.read(k * e * 4), dtype=np.float32).reshape(k, e)
            biases = np.frombuffer(fh.read(k * 4), dtype=np.float32)
            heads = {
                d: None
                if d in skipped
                else {"w": weights[i].astype(np.float64), "b": float(biases[i])}
                for i, d in enumerate(diseases)
            }
        elif kind == KIND_MLP:
            dims = np.frombuffer(fh.read(24), dtype=np.int64)
            hidden, e_in, k_out = (int(v) for v in dims)
            def _block(rows, cols):
                size = rows * cols * 4
                return np.frombuffer(fh.read(size), dtype=np.float32).reshape(rows, cols).astype(np.float64)
            heads = {
                "mlp": {
                    "w1": _block(hidden, e_in),
                    "b1": _block(1, hidden)[0],
                    "w2": _block(k_out, hidden),
                    "b2": _block(1, k_out)[0],
                }
            }
        else:
            heads = pickle.load(fh)
    return Stage2Model(
        kind=kind,
        mode=header["mode"],
        diseases=diseases,
        e=e,
        label_space_digest=header["label_space_digest"],
        input_space=header["input_space"],
        hyper=header.get("hyper", {}),
        heads=heads,
        warnings=list(header.get("warnings", [])),
    )
