"""Sectioned ``key = value`` experiment configs with line-numbered errors."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .dro import KINDS as CONJUGATE_KINDS
from .errors import ConfigError
from .problems import REFERENCE_RATIOS

ALGORITHMS = ("fotrgs", "sotrgs", "fotrgs-vr", "sotrgs-vr", "drtr", "sgd")
POLICIES = ("zero", "scaled_identity", "sampled_hessian", "projected_subspace")
DEFAULT_POLICY = {
    "fotrgs": "zero",
    "sotrgs": "sampled_hessian",
    "fotrgs-vr": "zero",
    "sotrgs-vr": "sampled_hessian",
    "drtr": "projected_subspace",
}
TAG_OF = {"fotrgs": "FOTRGS", "sotrgs": "SOTRGS", "fotrgs-vr": "FOTRGS-VR", "sotrgs-vr": "SOTRGS-VR", "drtr": "DRTR"}
PROBLEMS = ("quartic", "exp", "quadratic", "logistic", "mlp")
NOISES = ("none", "additive", "multiplicative", "identity", "rank_one")

REQUIRED = object()


def _choice(options):
    def conv(s):
        s = s.strip().lower()
        if s not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return s
    conv.__name__ = "choice"
    return conv


def _bool(s):
    s = s.strip().lower()
    if s in ("true", "yes", "on", "1"):
        return True
    if s in ("false", "no", "off", "0"):
        return False
    raise ValueError("expected true or false")


def _floats(s):
    return tuple(float(v) for v in s.replace(",", " ").split())


def _ints(s):
    """Integers separated by commas or spaces; ``a-b`` is the inclusive range."""
    out = []
    for tok in s.replace(",", " ").split():
        lo, sep, hi = tok.partition("-")
        if sep and lo:
            if int(hi) < int(lo):
                raise ValueError(f"empty range {tok}")
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(tok))
    out = tuple(out)
    if not out:
        raise ValueError("expected at least one integer")
    return out


def _opt_choice(options):
    base = _choice(options + ("none",))

    def conv(s):
        v = base(s)
        return None if v == "none" else v
    return conv


SCHEMA = {
    "problem": {
        "kind": (_choice(PROBLEMS), REQUIRED),
        "dim": (int, 4),
        "noise": (_choice(NOISES), "none"),
        "noise_scale": (float, 0.0),
        "diag": (_floats, None),
        "x0": (_floats, None),
        "n_features": (int, 10),
        "n_classes": (int, 10),
        "base_per_class": (int, 200),
        "ratios": (_floats, REFERENCE_RATIOS),
        "separation": (float, 3.0),
        "data_seed": (int, 0),
        "test_base_per_class": (int, 200),
        "hidden": (int, 16),
        "init_seed": (int, 0),
    },
    "algorithm": {
        "name": (_choice(ALGORITHMS), REQUIRED),
        "policy": (_choice(POLICIES), None),
        "rho": (float, None),
        "epsilon": (float, REQUIRED),
        "schedule": (_choice(("derived", "manual")), "derived"),
        "L0": (float, 1.0),
        "L1": (float, 0.0),
        "G0": (float, 0.0),
        "G1": (float, 0.0),
        "M0": (float, None),
        "M1": (float, None),
        "K0": (float, None),
        "K1": (float, None),
        "delta_F": (float, 1.0),
        "beta": (float, 0.0),
        "delta": (float, None),
        "s1": (int, None),
        "s2": (int, None),
        "s3": (int, None),
        "q": (int, None),
        "T": (int, None),
        "lr": (float, 0.01),
        "momentum": (float, 0.9),
        "batch": (int, 64),
        "x_prev": (_floats, None),
    },
    "dro": {
        "conjugate": (_choice(CONJUGATE_KINDS), REQUIRED),
        "alpha": (float, None),
        "penalty": (float, 1.0),
    },
    "run": {
        "seeds": (_ints, REQUIRED),
        "stop_when": (_opt_choice(("fosp", "sosp")), None),
        "full_batch": (_bool, True),
        "lambda_min": (_bool, False),
        "check_kkt": (_bool, True),
        "estimator_error": (_bool, False),
        "subspace_gap": (_bool, False),
        "timing": (_bool, False),
        "c1": (float, 1.0),
        "c2": (float, 1.0),
    },
}


@dataclass(frozen=True)
class ExperimentConfig:
    problem: dict
    algorithm: dict
    run: dict
    dro: Optional[dict] = None
    source: str = field(default="", compare=False, repr=False)

    @property
    def epsilon(self) -> float:
        return self.algorithm["epsilon"]

    @property
    def seeds(self) -> tuple:
        return self.run["seeds"]

    @property
    def policy(self) -> Optional[str]:
        return self.algorithm["policy"]

    @property
    def is_classification(self) -> bool:
        return self.problem["kind"] in ("logistic", "mlp")

    def with_seeds(self, seeds) -> "ExperimentConfig":
        return ExperimentConfig(self.problem, self.algorithm, dict(self.run, seeds=tuple(seeds)), self.dro, self.source)


def parse_config(text: str) -> ExperimentConfig:
    """Parse ``[problem]``, ``[algorithm]``, ``[dro]`` and ``[run]`` sections.

    Unknown sections or keys, duplicate keys, malformed values and missing
    required keys raise ``ConfigError`` carrying the offending line number.
    ``#`` and ``;`` start comments.
    """
    raw = {}
    header_line = {}
    section = None
    lines = text.splitlines()
    for no, line in enumerate(lines, 1):
        s = line.split("#", 1)[0].split(";", 1)[0].strip()
        if not s:
            continue
        if s.startswith("["):
            if not s.endswith("]"):
                raise ConfigError(f"malformed section header {s!r}", no)
            section = s[1:-1].strip().lower()
            if section not in SCHEMA:
                raise ConfigError(f"unknown section [{section}]", no)
            if section in raw:
                raise ConfigError(f"duplicate section [{section}]", no)
            raw[section] = {}
            header_line[section] = no
            continue
        if section is None:
            raise ConfigError("key outside of any section", no)
        if "=" not in s:
            raise ConfigError(f"expected 'key = value', got {s!r}", no)
        key, value = (p.strip() for p in s.split("=", 1))
        schema = SCHEMA[section]
        if key not in schema:
            raise ConfigError(f"unknown key {key!r} in [{section}]", no)
        if key in raw[section]:
            raise ConfigError(f"duplicate key {key!r}", no)
        conv = schema[key][0]
        try:
            raw[section][key] = (conv(value), no)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}", no) from None

    end = len(lines)
    out = {}
    for name, schema in SCHEMA.items():
        if name not in raw:
            if name == "dro":
                out[name] = None
                continue
            raise ConfigError(f"missing section [{name}]", end)
        vals = {}
        for key, (_, default) in schema.items():
            if key in raw[name]:
                vals[key] = raw[name][key][0]
            elif default is REQUIRED:
                raise ConfigError(f"missing required key {key!r} in [{name}]", header_line[name])
            else:
                vals[key] = default
        out[name] = vals
    lineof = {(sec, k): v[1] for sec, kv in raw.items() for k, v in kv.items()}
    _resolve(out, lineof, header_line)
    return ExperimentConfig(out["problem"], out["algorithm"], out["run"], out["dro"], text)


def _resolve(cfg, lineof, header_line):
    prob, alg, dro = cfg["problem"], cfg["algorithm"], cfg["dro"]

    def at(sec, key):
        return lineof.get((sec, key), header_line.get(sec))

    name = alg["name"]
    if name != "sgd" and alg["policy"] is None:
        alg["policy"] = DEFAULT_POLICY[name]
    if name == "sgd" and alg["policy"] is not None:
        raise ConfigError("the sgd baseline takes no policy", at("algorithm", "policy"))
    if name == "drtr" and alg["policy"] != "projected_subspace":
        raise ConfigError("drtr always uses the projected_subspace policy", at("algorithm", "policy"))
    if name != "drtr" and alg["policy"] == "projected_subspace":
        raise ConfigError("projected_subspace policy is only available to drtr", at("algorithm", "policy"))
    if name.endswith("-vr") and alg["policy"] not in ("zero", "scaled_identity", "sampled_hessian"):
        raise ConfigError("variance-reduced runs take zero, scaled_identity or sampled_hessian", at("algorithm", "policy"))
    # the first-order VR guarantee asks for a PSD model matrix; a sampled Hessian need not be
    if name == "fotrgs-vr" and alg["policy"] == "sampled_hessian":
        raise ConfigError("fotrgs-vr needs a PSD model matrix: use zero or scaled_identity", at("algorithm", "policy"))
    if alg["policy"] == "scaled_identity" and alg["rho"] is None:
        raise ConfigError("scaled_identity policy needs rho", at("algorithm", "policy"))
    if not 0 < alg["epsilon"] < 1:
        raise ConfigError("epsilon must lie in (0, 1)", at("algorithm", "epsilon"))
    if alg["x_prev"] is not None and name != "drtr":
        raise ConfigError("x_prev seeds the momentum of drtr only", at("algorithm", "x_prev"))
    if name == "sgd":
        if alg["T"] is None:
            raise ConfigError("the sgd baseline needs T", header_line["algorithm"])
    elif alg["schedule"] == "manual":
        for key in ("delta", "s1", "T"):
            if alg[key] is None:
                raise ConfigError(f"manual schedule needs {key!r}", header_line["algorithm"])

    # capability gate: Hessian-based methods need a model with Hessians
    needs_hessian = alg["policy"] == "sampled_hessian"
    if needs_hessian and prob["kind"] == "mlp":
        raise ConfigError(f"{name} with the sampled_hessian policy needs Hessians, which the mlp problem does not "
                          "provide", at("algorithm", "name"))
    if prob["noise"] != "none" and prob["kind"] not in ("quartic", "quadratic"):
        raise ConfigError("noise models apply to the quartic and quadratic problems only", at("problem", "noise"))
    if prob["kind"] == "quadratic" and prob["diag"] is None:
        raise ConfigError("quadratic problem needs 'diag'", at("problem", "kind"))
    if dro is not None:
        if not prob["kind"] in ("logistic", "mlp"):
            raise ConfigError("the dro section applies to classification problems only", header_line["dro"])
        if dro["conjugate"] in ("cvar", "smoothed_cvar") and dro["alpha"] is None:
            raise ConfigError(f"{dro['conjugate']} needs alpha", at("dro", "conjugate"))
        if dro["conjugate"] not in ("cvar", "smoothed_cvar") and dro["alpha"] is not None:
            raise ConfigError(f"alpha does not apply to {dro['conjugate']}", at("dro", "alpha"))
        if needs_hessian and dro["conjugate"] in ("chi2", "cvar"):
            raise ConfigError(f"{dro['conjugate']} is not twice differentiable; use a first-order policy",
                              at("dro", "conjugate"))
        if name == "drtr" and dro["conjugate"] in ("chi2", "cvar"):
            raise ConfigError(f"drtr needs Hessian-vector products; {dro['conjugate']} is not twice differentiable",
                              at("dro", "conjugate"))
