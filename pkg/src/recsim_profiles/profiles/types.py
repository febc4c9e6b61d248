from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

TASK_FAMILIES = ("discrimination", "ranking", "rating")
GENERATORS = (
    "apg4recsim",
    "semantic_merge",
    "recent_interaction",
    "recagent_style",
    "agent4rec_style",
    "empty",
)
BANNED_KEYS = frozenset({"gender", "age", "location", "occupation"})


@dataclass(frozen=True)
class TraitDescriptor:
    text: str
    source: str = "extracted"  # extracted | consolidated | baseline
    status: str = "active"  # active | background
    rationale: Optional[str] = None

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("trait text must be non-empty")
        if self.source not in ("extracted", "consolidated", "baseline"):
            raise ValueError(f"bad trait source {self.source!r}")
        if self.status not in ("active", "background"):
            raise ValueError(f"bad trait status {self.status!r}")

    @property
    def key(self) -> str:
        return " ".join(self.text.casefold().split())

    def to_record(self) -> dict:
        rec = {"text": self.text, "source": self.source, "status": self.status}
        if self.rationale is not None:
            rec["rationale"] = self.rationale
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "TraitDescriptor":
        return cls(rec["text"], rec.get("source", "extracted"), rec.get("status", "active"), rec.get("rationale"))


@dataclass(frozen=True)
class RawAttributePool:
    pools: tuple[tuple[str, ...], ...]
    union: tuple[str, ...]


@dataclass(frozen=True)
class GenerationContext:
    dataset_info: str
    task_desc: str
    exemplar: str

    def __post_init__(self):
        if not (self.dataset_info and self.task_desc and self.exemplar):
            raise ValueError("all three context parts must be non-empty")


@dataclass(frozen=True)
class DecisionStep:
    id: str
    name: str
    description: str = ""


@dataclass(frozen=True)
class DecisionPath:
    task_family: str
    steps: tuple[DecisionStep, ...]
    origin: str = "heuristic_template"  # heuristic_template | llm_generated

    def __post_init__(self):
        if self.task_family not in TASK_FAMILIES:
            raise ValueError(f"unknown task family {self.task_family!r}")
        if not 1 <= len(self.steps) <= 6:
            raise ValueError("a decision path has 1-6 steps")
        if len({s.id for s in self.steps}) != len(self.steps):
            raise ValueError("step ids must be unique")

    @property
    def step_ids(self) -> list[str]:
        return [s.id for s in self.steps]

    def step(self, step_id: str) -> DecisionStep:
        for s in self.steps:
            if s.id == step_id:
                return s
        raise KeyError(step_id)

    def to_record(self) -> dict:
        return {
            "task_family": self.task_family,
            "origin": self.origin,
            "steps": [{"id": s.id, "name": s.name, "description": s.description} for s in self.steps],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "DecisionPath":
        steps = tuple(DecisionStep(s["id"], s["name"], s.get("description", "")) for s in rec["steps"])
        return cls(rec["task_family"], steps, rec.get("origin", "heuristic_template"))


@dataclass(frozen=True)
class Evidence:
    instance_id: str
    step_id: str
    perturbed_text: str
    change: str

    def to_record(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "step_id": self.step_id,
            "perturbed_text": self.perturbed_text,
            "change": self.change,
        }


@dataclass(frozen=True)
class PolicyBinding:
    trait: TraitDescriptor
    step_ids: tuple[str, ...]
    evidence: tuple[Evidence, ...]

    def __post_init__(self):
        if not self.step_ids:
            raise ValueError("a binding needs at least one step")
        if not self.evidence:
            raise ValueError("a binding needs counterfactual evidence")

    def to_record(self) -> dict:
        return {
            "trait": self.trait.to_record(),
            "step_ids": list(self.step_ids),
            "evidence": [e.to_record() for e in self.evidence],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "PolicyBinding":
        return cls(
            TraitDescriptor.from_record(rec["trait"]),
            tuple(rec["step_ids"]),
            tuple(Evidence(**e) for e in rec["evidence"]),
        )


@dataclass
class TaskAlignedProfile:
    user_id: str
    generator: str
    traits: list[TraitDescriptor] = field(default_factory=list)
    background_traits: list[TraitDescriptor] = field(default_factory=list)
    policies: list[PolicyBinding] = field(default_factory=list)
    # non-demographic identifier tags (e.g. the RecAgent role)
    tags: dict[str, str] = field(default_factory=dict)
    task_family: Optional[str] = None
    decision_path: Optional[DecisionPath] = None
    # rendered raw items, used by the recent-interaction baseline
    history_items: list[str] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ValueError(f"unknown generator {self.generator!r}")
        banned = BANNED_KEYS & {k.casefold() for k in self.tags}
        if banned:
            raise ValueError(f"demographic attributes are not allowed in profiles: {sorted(banned)}")
        active = {t.key for t in self.traits}
        for b in self.policies:
            if b.trait.key not in active:
                raise ValueError(f"policy references non-active trait {b.trait.text!r}")
            if self.decision_path is not None:
                unknown = set(b.step_ids) - set(self.decision_path.step_ids)
                if unknown:
                    raise ValueError(f"policy references unknown steps {sorted(unknown)}")

    def to_record(self) -> dict:
        return {
            "user_id": self.user_id,
            "generator": self.generator,
            "task_family": self.task_family,
            "tags": dict(sorted(self.tags.items())),
            "traits": [t.to_record() for t in self.traits],
            "background_traits": [t.to_record() for t in self.background_traits],
            "policies": [p.to_record() for p in self.policies],
            "decision_path": self.decision_path.to_record() if self.decision_path else None,
            "history_items": list(self.history_items),
            "provenance": self.provenance,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "TaskAlignedProfile":
        return cls(
            user_id=rec["user_id"],
            generator=rec["generator"],
            traits=[TraitDescriptor.from_record(t) for t in rec.get("traits", [])],
            background_traits=[TraitDescriptor.from_record(t) for t in rec.get("background_traits", [])],
            policies=[PolicyBinding.from_record(p) for p in rec.get("policies", [])],
            tags=dict(rec.get("tags", {})),
            task_family=rec.get("task_family"),
            decision_path=DecisionPath.from_record(rec["decision_path"]) if rec.get("decision_path") else None,
            history_items=list(rec.get("history_items", [])),
            provenance=rec.get("provenance", {}),
        )


def empty_profile(user_id: str, task_family: Optional[str] = None) -> TaskAlignedProfile:
    return TaskAlignedProfile(user_id=user_id, generator="empty", task_family=task_family)
