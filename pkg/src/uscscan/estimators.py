"""scikit-learn style wrappers so the detector composes with pipelines,
``get_params``/``set_params`` and ``clone``."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_bytecode, normalize_address
from .bytecode import DEFAULT_OUTBOUND_WINDOW, BytecodeFeatures, analyze_bytecode
from .classifier import (
    ContractAnalysis,
    Pattern,
    PatternClassification,
    analyze_contract,
    classify,
)
from .ingest import ContractRecord, CreationTrace
from .signatures import KeywordRules, UpgradeFunctionDb

FEATURE_NAMES = (
    "has_call",
    "has_staticcall",
    "has_delegatecall",
    "has_selfdestruct",
    "has_create2",
    "has_fallback",
    "n_local_selectors",
    "n_outbound_selectors",
)

_NULL_HASH = "0x" + "00" * 32


def _as_code(sample) -> bytes:
    if isinstance(sample, ContractRecord):
        return sample.bytecode
    if isinstance(sample, dict):
        return check_bytecode(sample.get("bytecode"))
    return check_bytecode(sample)


def _as_list(X) -> list:
    if isinstance(X, (str, bytes, bytearray, dict)):
        raise ValueError("expected a sequence of samples, got a single sample")
    return list(X)


class BytecodeFeaturizer(TransformerMixin, BaseEstimator):
    """Runtime bytecode -> opcode/selector feature matrix.

    Each sample is bytes, a hex string, a ``ContractRecord`` or a dict with a
    ``bytecode`` key.
    """

    def __init__(self, outbound_window: int = DEFAULT_OUTBOUND_WINDOW):
        self.outbound_window = outbound_window

    def fit(self, X=None, y=None):
        self.n_features_out_ = len(FEATURE_NAMES)
        return self

    def extract(self, X) -> list[BytecodeFeatures]:
        return [analyze_bytecode(_as_code(s), self.outbound_window) for s in _as_list(X)]

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "n_features_out_")
        rows = [
            [f.has_call, f.has_staticcall, f.has_delegatecall, f.has_selfdestruct,
             f.has_create2, f.has_fallback, len(f.local_selectors), len(f.outbound_selectors)]
            for f in self.extract(X)
        ]
        return np.asarray(rows, dtype=np.int64).reshape(len(rows), len(FEATURE_NAMES))

    def get_feature_names_out(self, input_features=None) -> np.ndarray:
        return np.asarray(FEATURE_NAMES, dtype=object)


class UpgradePatternDetector(ClassifierMixin, BaseEstimator):
    """Rule-based upgrade-pattern classifier.

    ``fit`` only compiles the upgrade-function db; there is nothing to learn.
    Samples are ``ContractAnalysis`` objects, ``ContractRecord``s, raw
    bytecode, or dicts with ``bytecode`` and optionally ``address``,
    ``logic_bytecode``, ``logic_address`` and ``trace`` (creation-trace
    opcode names).
    """

    def __init__(
        self,
        db_path: str | None = None,
        related_words: tuple[str, ...] | None = None,
        outbound_window: int = DEFAULT_OUTBOUND_WINDOW,
    ):
        self.db_path = db_path
        self.related_words = related_words
        self.outbound_window = outbound_window

    def fit(self, X=None, y=None):
        rules = KeywordRules() if self.related_words is None else KeywordRules(
            related_words=tuple(self.related_words)
        )
        self.db_ = UpgradeFunctionDb.load(self.db_path, rules)
        self.classes_ = np.asarray([p.value for p in Pattern], dtype=object)
        return self

    def _analysis(self, sample, i: int) -> ContractAnalysis:
        if isinstance(sample, ContractAnalysis):
            return sample
        if isinstance(sample, ContractRecord):
            return analyze_contract(sample, self.db_,
                                    features=analyze_bytecode(sample.bytecode, self.outbound_window))
        info = sample if isinstance(sample, dict) else {"bytecode": sample}
        address = normalize_address(info.get("address") or i + 1)
        record = ContractRecord(address, check_bytecode(info.get("bytecode")), address, _NULL_HASH, 0)
        trace = None
        if info.get("trace") is not None:
            trace = CreationTrace(_NULL_HASH, address, tuple(o.upper() for o in info["trace"]))
        logic_code = check_bytecode(info.get("logic_bytecode"))
        logic_address = info.get("logic_address")
        if logic_code and logic_address is None:
            logic_address = normalize_address((1 << 159) + i)
        return analyze_contract(
            record, self.db_,
            features=analyze_bytecode(record.bytecode, self.outbound_window),
            logic_address=normalize_address(logic_address) if logic_address else None,
            logic_features=analyze_bytecode(logic_code, self.outbound_window) if logic_code else None,
            creation_trace=trace,
        )

    def classify(self, X) -> list[PatternClassification]:
        """Full classifications, evidence included."""
        check_is_fitted(self, "db_")
        return [classify(self._analysis(s, i)) for i, s in enumerate(_as_list(X))]

    def predict(self, X) -> np.ndarray:
        return np.asarray([c.pattern.value for c in self.classify(X)], dtype=object)
