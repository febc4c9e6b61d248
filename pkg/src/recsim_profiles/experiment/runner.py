"""Experiment orchestration: ingest, profile generation, evaluation and probes.

Output tree under the configured output directory::

    dataset/      canonical files, split manifest, item stats, exclusions
    profiles/     one store per generator (sweep/ holds history-sweep stores)
    decisions/    per-cell decision logs
    reports/      one JSON report per cell
    plots/        long-format CSV for box plots

Nothing written here carries wall-clock time, latency or absolute paths, so
two executions with the same config and a scripted or replay backend give
byte-identical trees.

Seed tree: ``root -> run r -> user u -> instance n -> (cell tag)``; the
request seed hangs off the instance seed. Instance seeds do not depend on
the generator, so every generator sees the same instances.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import random
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Optional

from .. import metrics
from ..data import (
    SplitDataset,
    chronological_split,
    compute_item_stats,
    parse_amazon_reviews,
    parse_movielens,
    read_canonical,
    write_canonical,
)
from ..errors import BackendError, ConfigError, DataError, DecisionError, StageError
from ..llm import Gateway, LiveBackend, ReplayBackend, ScriptedBackend
from ..llm.backends import load_scripted_table
from ..profiles.baselines import (
    baseline_agent4rec_style,
    baseline_recagent_style,
    baseline_recent_interaction,
)
from ..profiles.pipeline import ProfileConfig, generate_profile
from ..profiles.store import ProfileStoreWriter, dumps, read_store
from ..profiles.types import TaskAlignedProfile, empty_profile
from ..sampling import NegativeSampler, SamplerSpec, attribute_probe_config, position_probe
from ..seeds import derive_seed
from ..synthetic import HeuristicResponder, bundled_synthetic_paths
from ..tasks import (
    AgentSettings,
    SkipInstance,
    TaskInstance,
    build_discrimination_instance,
    build_ranking_instance,
    build_rating_instance,
    run_task,
    score_decision,
)
from .config import ExperimentConfig

logger = logging.getLogger(__name__)

FAMILY_AGNOSTIC = ("recent_interaction", "recagent_style", "agent4rec_style", "empty")
PROBE_KINDS = ("position", "popularity", "attributes", "history_sweep")
CELL_LABELS = ("dataset", "task", "generator", "setting", "strategy", "mask", "variant")


class RunAborted(BackendError):
    """Profile generation failed for more users than the failure ceiling allows."""


def build_backend(config: ExperimentConfig, transport=None):
    """Backend from the config; ``transport`` lets tests stand in for the network."""
    b = config.backend

    def live():
        return LiveBackend(b.base_url, b.api_key_env, max_attempts=b.transport_attempts, transport=transport)

    def scripted():
        table = load_scripted_table(config.resolve(b.scripted_table)) if b.scripted_table else None
        responder = HeuristicResponder() if b.responder == "heuristic" else None
        if table is None and responder is None:
            raise ConfigError("scripted backend needs a table or a responder")
        return ScriptedBackend(table, responder)

    if b.kind == "live":
        return live()
    if b.kind == "scripted":
        return scripted()
    inner = None
    if b.mode != "strict":
        inner = live() if b.inner == "live" else scripted()
    return ReplayBackend(config.resolve(b.cache_path), inner, b.mode)


def _file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def _write_csv(path: Path, header: list[str], rows: Iterable[list]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8")


def cell_filename(labels: dict) -> str:
    parts = [str(labels.get(k, "")) for k in CELL_LABELS[1:] if labels.get(k, "")]
    return re.sub(r"[^A-Za-z0-9@.=+-]+", "_", "__".join(parts))


@dataclass
class CellOutcome:
    """One report cell before aggregation: per-run values plus accounting."""

    labels: dict
    metric: str
    per_run: list[Optional[float]] = field(default_factory=list)
    attempted: int = 0
    scored: int = 0
    skipped: int = 0
    errors: int = 0
    sampler_warnings: int = 0


@dataclass
class _Job:
    run: int
    user: str
    n: int
    instance_seed: int


class Experiment:
    def __init__(self, config: ExperimentConfig, *, backend=None, gateway: Gateway | None = None):
        self.config = config
        self.out = config.out_path
        if gateway is None:
            backend = backend if backend is not None else build_backend(config)
            gateway = Gateway(
                backend, parse_attempts=config.backend.parse_attempts, max_in_flight=config.backend.max_in_flight
            )
        self.gateway = gateway
        self.settings = AgentSettings(
            model_id=config.backend.model_id,
            temperature=config.backend.temperature,
            max_tokens=config.backend.max_tokens,
            popularity_mode=config.task.popularity_mode,
            repair=not config.task.strict_decisions,
        )
        self._split: SplitDataset | None = None
        self._stats = None

    # ----------------------------------------------------------- plumbing
    def _map(self, fn, jobs: list) -> list:
        """Fan out over the in-flight limit; results come back in job order."""
        workers = self.gateway.max_in_flight
        if workers <= 1 or len(jobs) <= 1:
            return [fn(j) for j in jobs]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, jobs))

    @property
    def dataset_dir(self) -> Path:
        return self.out / "dataset"

    def _source_files(self) -> list[Path]:
        ds = self.config.dataset
        if ds.kind == "synthetic":
            if ds.ratings and ds.movies:
                return [self.config.resolve(ds.ratings), self.config.resolve(ds.movies)]
            return list(bundled_synthetic_paths())
        if ds.kind == "movielens":
            return [self.config.resolve(ds.ratings), self.config.resolve(ds.movies)]
        return [self.config.resolve(ds.reviews), self.config.resolve(ds.metadata)]

    def ingest_digest(self) -> str:
        ds = self.config.dataset
        spec = {
            "kind": ds.kind,
            "name": self.config.dataset_name,
            "strict": ds.strict,
            "split_ratio": ds.split_ratio,
            "min_interactions": ds.min_interactions,
        }
        files = [_file_digest(p) for p in self._source_files()]
        return hashlib.sha256(dumps({"spec": spec, "files": files}).encode()).hexdigest()[:16]

    # ------------------------------------------------------------- ingest
    def ingest(self) -> dict:
        """Parse, split and persist. A rerun with unchanged inputs is a no-op."""
        sources = self._source_files()
        missing = [str(p) for p in sources if not p.exists()]
        if missing:
            raise ConfigError(f"dataset files not found: {missing}")
        digest = self.ingest_digest()
        manifest_path = self.dataset_dir / "manifest.json"
        if manifest_path.exists():
            manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
            if manifest.get("digest") == digest:
                logger.info("dataset already ingested (digest %s)", digest)
                return manifest

        ds = self.config.dataset
        if ds.kind == "amazon":
            dataset = parse_amazon_reviews(sources[0], sources[1], strict=ds.strict, name=self.config.dataset_name)
        else:
            dataset = parse_movielens(sources[0], sources[1], strict=ds.strict, name=self.config.dataset_name)
        split = chronological_split(dataset, ds.split_ratio, ds.min_interactions)
        stats = compute_item_stats(split)

        write_canonical(dataset, self.dataset_dir)
        _write_json(self.dataset_dir / "split.json", split.manifest())
        _write_json(
            self.dataset_dir / "stats.json",
            {
                "popularity": stats.popularity,
                "mean_rating": stats.mean_rating,
                "popularity_quantile": stats.popularity_quantile,
                "unseen": sorted(stats.unseen),
                "global_mean": stats.global_mean,
            },
        )
        exclusions = {
            "min_interactions": max(2, ds.min_interactions),
            "excluded_users": split.excluded_users,
            "n_excluded": len(split.excluded_users),
        }
        _write_json(self.dataset_dir / "exclusions.json", exclusions)
        manifest = {
            "digest": digest,
            "dataset": self.config.dataset_name,
            "n_users": len(dataset.interactions_by_user),
            "n_eligible_users": len(split.users),
            "n_items": len(dataset.items),
            "n_interactions": dataset.n_interactions,
            "n_excluded": len(split.excluded_users),
            "n_skipped_lines": dataset.skipped,
        }
        # manifest last: its presence marks a complete ingest
        _write_json(manifest_path, manifest)
        self._split = split
        self._stats = stats
        return manifest

    def load(self) -> tuple[SplitDataset, object]:
        if self._split is None:
            self.ingest()
            if self._split is None:
                dataset = read_canonical(self.dataset_dir)
                ds = self.config.dataset
                self._split = chronological_split(dataset, ds.split_ratio, ds.min_interactions)
                self._stats = compute_item_stats(self._split)
        return self._split, self._stats

    def eligible_users(self) -> list[str]:
        split, _ = self.load()
        users = sorted(split.users, key=_natural_key)
        if self.config.task.max_users is not None:
            users = users[: self.config.task.max_users]
        return users

    # ----------------------------------------------------------- profiles
    def _profile_config(self, family: str, history_window: int | None = None) -> ProfileConfig:
        g = self.config.generator
        return ProfileConfig(
            task_family=family,
            history_window=history_window or g.history_window,
            n_init=g.n_init,
            delta=g.delta,
            path_mode=g.path_mode,
            perturb_mode=g.perturb_mode,
            diversify=g.diversify,
            probes_per_step=g.probes_per_step,
            probe_candidates=self.config.task.candidates,
            probe_rating_items=self.config.task.rating_items,
            seed=self.config.seed,
            config_digest=self.config.profile_digest(),
        )

    def _effective_generator(self, generator: str) -> str:
        if generator == "apg4recsim" and self.config.generator.skip_stage3:
            return "semantic_merge"
        return generator

    def _make_profile(self, generator: str, family: str | None, user: str, history_window: int) -> TaskAlignedProfile:
        split, stats = self.load()
        seed = self.config.seed
        if generator == "empty":
            return empty_profile(user)
        if generator == "recent_interaction":
            return baseline_recent_interaction(user, split, history_window)
        if generator == "recagent_style":
            return baseline_recagent_style(user, split, self.gateway, k=history_window, settings=self.settings, seed=seed)
        if generator == "agent4rec_style":
            return baseline_agent4rec_style(user, split, self.gateway, k=history_window, settings=self.settings, seed=seed)
        cfg = replace(self._profile_config(family, history_window), skip_stage3=generator == "semantic_merge")
        return generate_profile(user, split, stats, cfg, self.gateway, settings=self.settings)

    def store_path(self, generator: str, history_window: int | None = None) -> Path:
        if history_window is None:
            return self.out / "profiles" / f"{generator}.jsonl"
        return self.out / "profiles" / "sweep" / f"h{history_window}" / f"{generator}.jsonl"

    def generate_profiles(
        self,
        generators: Iterable[str] | None = None,
        families: Iterable[str] | None = None,
        *,
        history_window: int | None = None,
    ) -> dict[str, dict]:
        """Fill one store per generator; users already present are skipped."""
        users = self.eligible_users()
        window = history_window or self.config.generator.history_window
        families = list(families or self.config.task.families)
        summary = {}
        for requested in generators or self.config.generator.generators:
            generator = self._effective_generator(requested)
            fams = [None] if generator in FAMILY_AGNOSTIC else families
            header = {
                "generator": generator,
                "config_digest": self.config.profile_digest(),
                "history_window": window,
            }
            path = self.store_path(generator, history_window)
            writer = ProfileStoreWriter(path, header)
            _, existing = read_store(path)
            order = [_key(generator, fam, u) for fam in fams for u in users]
            todo = [(fam, u) for fam in fams for u in users if _key(generator, fam, u) not in existing]
            total = len(order)
            ceiling = self.config.generator.failure_ceiling
            failures: list[dict] = []

            def work(job):
                fam, user = job
                try:
                    profile = self._make_profile(generator, fam, user, window)
                except (StageError, DecisionError, DataError, BackendError) as exc:
                    return job, None, exc
                if generator in FAMILY_AGNOSTIC:
                    profile.provenance.setdefault("config_digest", header["config_digest"])
                return job, profile, None

            # chunks keep the early abort responsive without losing order
            chunk = max(1, self.gateway.max_in_flight) * 4
            for start in range(0, len(todo), chunk):
                for (fam, user), profile, exc in self._map(work, todo[start : start + chunk]):
                    if exc is not None:
                        logger.warning("profile %s/%s/%s failed: %s", generator, fam or "any", user, exc)
                        failures.append({"user": user, "family": fam, "error": f"{type(exc).__name__}: {exc}"})
                    else:
                        writer.append(profile)
                if total and len(failures) > ceiling * total:
                    writer.finalize(order)
                    self._write_failures(generator, history_window, failures)
                    raise RunAborted(
                        f"{generator}: {len(failures)} of {total} profiles failed, above the {ceiling:.0%} ceiling"
                    )
            writer.finalize(order)
            self._write_failures(generator, history_window, failures)
            summary[generator] = {
                "profiles": total - len(failures),
                "failures": len(failures),
                "resumed": total - len(todo),
            }
        return summary

    def _write_failures(self, generator: str, history_window: int | None, failures: list[dict]) -> None:
        path = self.store_path(generator, history_window).with_suffix(".failures.json")
        if failures:
            _write_json(path, failures)
        elif path.exists():
            path.unlink()

    def load_profiles(self, generator: str, history_window: int | None = None) -> dict[str, TaskAlignedProfile]:
        if generator == "empty":
            return {}
        path = self.store_path(generator, history_window)
        header, profiles = read_store(path)
        if header is None:
            raise DataError(f"no profile store for {generator}; run `profiles generate` first")
        if header.get("config_digest") != self.config.profile_digest():
            raise DataError(f"profile store {path.name} was built with a different config; regenerate it")
        return profiles

    # ---------------------------------------------------------- evaluation
    def _jobs(self, run: int, users: list[str], tag: str) -> list[_Job]:
        jobs = []
        for user in users:
            for n in range(self.config.task.instances_per_user):
                seed = derive_seed(self.config.seed, "run", run, "user", user, "instance", n, tag)
                jobs.append(_Job(run, user, n, seed))
        return jobs

    def _run_cells(
        self,
        *,
        family: str,
        generator: str,
        cells: list[dict],
        seed_tag: str,
        build: Callable[[dict, _Job, random.Random], TaskInstance],
        profile_for: Callable[[str], Optional[TaskAlignedProfile]],
        log_name: str,
    ) -> list[CellOutcome]:
        """Run every cell for every run.

        ``cells`` share instance seeds (``seed_tag``), so cells that differ
        only by sampler, mask or position see the same positives.
        """
        split, stats = self.load()
        users = self.eligible_users()
        metric_names = _metric_names(family)
        outcomes = [[CellOutcome(dict(c), m) for m in metric_names] for c in cells]
        log_lines: list[str] = []

        for ci, cell in enumerate(cells):
            for run in range(1, self.config.runs + 1):
                jobs = self._jobs(run, users, seed_tag)

                def work(job: _Job, cell=cell):
                    rng = random.Random(job.instance_seed)
                    try:
                        instance = build(cell, job, rng)
                    except SkipInstance as exc:
                        return job, None, None, f"skip: {exc}"
                    profile = profile_for(job.user)
                    if profile is None:
                        return job, instance, None, "error: no profile"
                    try:
                        decision = run_task(
                            profile, instance, stats, split.items, self.gateway, self.settings,
                            request_seed=derive_seed(job.instance_seed, "request"),
                        )
                    except (DecisionError, BackendError) as exc:
                        return job, instance, None, f"error: {type(exc).__name__}: {exc}"
                    return job, instance, decision, "scored"

                results = self._map(work, jobs)
                self._aggregate_run(family, outcomes[ci], results)
                for job, instance, decision, status in results:
                    rec = {
                        "cell": {k: v for k, v in cell.items() if not k.startswith("_")},
                        "run": run,
                        "user": job.user,
                        "n": job.n,
                        "status": status,
                    }
                    if instance is not None:
                        rec["instance"] = instance.to_record()
                    if decision is not None:
                        rec["decision"] = decision.payload()
                        rec["repair_applied"] = decision.repair_applied
                        if family != "rating":
                            rec["metrics"] = score_decision(instance, decision)
                    log_lines.append(dumps(rec))

        log_path = self.out / "decisions" / family / f"{log_name}.jsonl"
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log_path.write_text("".join(line + "\n" for line in log_lines), encoding="utf-8")
        return [o for group in outcomes for o in group]

    def _aggregate_run(self, family: str, outcomes: list[CellOutcome], results) -> None:
        scored = [(inst, dec) for _, inst, dec, status in results if status == "scored"]
        n_skip = sum(1 for *_, status in results if status.startswith("skip"))
        n_err = sum(1 for *_, status in results if status.startswith("error"))
        n_warn = sum(1 for _, inst, _, _ in results if inst is not None and inst.sampler_warning)
        if family == "rating":
            preds, truths = {}, {}
            for inst, dec in scored:
                for item, truth in inst.truths:
                    preds[(inst.instance_id, item)] = dec.ratings[item]
                    truths[(inst.instance_id, item)] = truth
            values = {}
            if truths:
                values["rmse"] = metrics.rmse(preds, truths)
                values["jsd"] = metrics.macro_rating_jsd(
                    preds, truths, self.settings.rating_scale, mode=self.config.task.jsd_mode
                )
        else:
            per_instance = [score_decision(inst, dec) for inst, dec in scored]
            values = {
                m: sum(s[m] for s in per_instance) / len(per_instance) for m in _metric_names(family)
            } if per_instance else {}
        for o in outcomes:
            o.per_run.append(values.get(o.metric))
            o.attempted += len(results)
            o.scored += len(scored)
            o.skipped += n_skip
            o.errors += n_err
            o.sampler_warnings += n_warn

    def _write_reports(self, outcomes: list[CellOutcome], subdir: str) -> list[dict]:
        records = []
        for o in outcomes:
            values = [v for v in o.per_run if v is not None]
            labels = {"dataset": self.config.dataset_name, **o.labels}
            rec = {
                "group": subdir,
                "labels": {k: str(labels.get(k, "")) for k in CELL_LABELS},
                "metric": o.metric,
                "config_digest": self.config.digest(),
                "runs": self.config.runs,
                "per_run": o.per_run,
                "accounting": {
                    "attempted": o.attempted,
                    "scored": o.scored,
                    "skipped": o.skipped,
                    "errors": o.errors,
                    "sampler_warnings": o.sampler_warnings,
                },
            }
            if o.metric == "jsd":
                rec["jsd_mode"] = self.config.task.jsd_mode
            if values:
                report = metrics.aggregate_runs(values, o.metric, config_digest=self.config.digest(), failures=o.errors)
                rec.update({"mean": report.mean, "std": report.std, "n_runs": report.n_runs})
            else:
                rec.update({"mean": None, "std": None, "n_runs": 0})
            name = cell_filename(labels) + f"__{o.metric}.json"
            _write_json(self.out / "reports" / subdir / name, rec)
            records.append(rec)
        return records

    def _profile_lookup(self, generator: str, family: str, history_window: int | None = None):
        generator = self._effective_generator(generator)
        if generator == "empty":
            return lambda user: empty_profile(user)
        profiles = self.load_profiles(generator, history_window)
        fam = None if generator in FAMILY_AGNOSTIC else family
        return lambda user: profiles.get(_key(generator, fam, user))

    def _sampler(self, spec: SamplerSpec | None = None) -> NegativeSampler:
        _, stats = self.load()
        return NegativeSampler(spec or self.config.sampler_spec(), stats)

    def evaluate(self, family: str, generators: Iterable[str] | None = None) -> list[dict]:
        if family not in ("discrimination", "ranking", "rating"):
            raise ConfigError(f"unknown task family {family!r}")
        split, stats = self.load()
        task = self.config.task
        mask = frozenset(task.mask)
        sampler = self._sampler()
        strategy = self.config.sampler_spec().label
        c = task.candidates

        if family == "discrimination":
            cells = [{"task": family, "setting": f"{p}:{c}", "strategy": strategy, "p": p} for p in task.discrimination_p]

            def build(cell, job, rng):
                return build_discrimination_instance(
                    job.user, split, stats, cell["p"], c, sampler, rng, mask=mask, instance_seed=job.instance_seed
                )
        elif family == "ranking":
            cells = [{"task": family, "setting": f"1:{c}", "strategy": strategy}]

            def build(cell, job, rng):
                return build_ranking_instance(
                    job.user, split, stats, c, sampler, rng, mask=mask, instance_seed=job.instance_seed
                )
        else:
            cells = [{"task": family, "setting": f"n{task.rating_items}"}]

            def build(cell, job, rng):
                return build_rating_instance(
                    job.user, split, task.rating_items, rng, instance_seed=job.instance_seed, mask=mask
                )

        outcomes = []
        for generator in generators or self.config.generator.generators:
            eff = self._effective_generator(generator)
            gen_cells = [{**cell, "generator": eff} for cell in cells]
            # p is a build parameter, not a label
            outcomes += self._run_cells(
                family=family,
                generator=eff,
                cells=gen_cells,
                seed_tag=family,
                build=build,
                profile_for=self._profile_lookup(generator, family),
                log_name=eff,
            )
        for o in outcomes:
            o.labels.pop("p", None)
        return self._write_reports(outcomes, "eval")

    # -------------------------------------------------------------- probes
    def probe(self, kind: str) -> list[dict]:
        kind = kind.replace("-", "_")
        if kind not in PROBE_KINDS:
            raise ConfigError(f"unknown probe {kind!r}; choose from {PROBE_KINDS}")
        return getattr(self, f"_probe_{kind}")()

    def _probe_position(self) -> list[dict]:
        split, stats = self.load()
        c = self.config.task.candidates
        positions = self.config.probes.positions
        sampler = self._sampler(SamplerSpec("uniform"))
        cells = [{"task": "ranking", "setting": f"pos{p}", "strategy": "uniform", "pos": p} for p in positions]

        def build(cell, job, rng):
            base = build_ranking_instance(job.user, split, stats, c, sampler, rng, instance_seed=job.instance_seed)
            (variant,) = position_probe(base, [cell["pos"]])
            return variant

        outcomes = []
        for generator in self.config.generator.generators:
            eff = self._effective_generator(generator)
            outcomes += [
                o for o in self._run_cells(
                    family="ranking", generator=eff,
                    cells=[{**cell, "generator": eff} for cell in cells],
                    seed_tag="position", build=build,
                    profile_for=self._profile_lookup(generator, "ranking"),
                    log_name=f"position__{eff}",
                )
                if o.metric == "ndcg@5"
            ]
        for o in outcomes:
            o.labels.pop("pos", None)
        records = self._write_reports(outcomes, "probe_position")
        self._plot_csv("position", records)
        return records

    def _probe_popularity(self) -> list[dict]:
        split, stats = self.load()
        p, c = self.config.probes.popularity_p, self.config.task.candidates
        specs = self.config.strategy_specs()
        samplers = {s.label: NegativeSampler(s, stats) for s in specs}
        cells = [{"task": "discrimination", "setting": f"{p}:{c}", "strategy": s.label} for s in specs]

        def build(cell, job, rng):
            return build_discrimination_instance(
                job.user, split, stats, p, c, samplers[cell["strategy"]], rng, instance_seed=job.instance_seed
            )

        outcomes = []
        for generator in self.config.generator.generators:
            eff = self._effective_generator(generator)
            outcomes += self._run_cells(
                family="discrimination", generator=eff,
                cells=[{**cell, "generator": eff} for cell in cells],
                seed_tag="popularity", build=build,
                profile_for=self._profile_lookup(generator, "discrimination"),
                log_name=f"popularity__{eff}",
            )
        records = self._write_reports(outcomes, "probe_popularity")
        self._plot_csv("popularity", records)
        return records

    def _probe_attributes(self) -> list[dict]:
        split, stats = self.load()
        plan = attribute_probe_config(self.config.attribute_masks(), self.config.probes.attribute_sampling)
        samplers = {s: NegativeSampler(cell.spec, stats) for cell in plan for s in [cell.sampling]}
        cells = [
            {
                "task": "discrimination",
                "generator": cell.generator,
                "setting": cell.setting,
                "strategy": cell.sampling,
                "mask": cell.mask_label,
                "_cell": cell,
            }
            for cell in plan
        ]

        def build(cell, job, rng):
            pc = cell["_cell"]
            return build_discrimination_instance(
                job.user, split, stats, pc.p, pc.c, samplers[pc.sampling], rng,
                mask=pc.mask, instance_seed=job.instance_seed,
            )

        # the seed tag carries p:c so masks and samplings share instances per setting
        outcomes = []
        for setting in sorted({c["setting"] for c in cells}):
            group = [c for c in cells if c["setting"] == setting]
            outcomes += self._run_cells(
                family="discrimination", generator="empty", cells=group,
                seed_tag=f"attributes:{setting}", build=build,
                profile_for=lambda user: empty_profile(user),
                log_name=f"attributes__{setting.replace(':', '-')}",
            )
        for o in outcomes:
            o.labels.pop("_cell", None)
        records = self._write_reports(outcomes, "probe_attributes")
        self._plot_csv("attributes", records)
        return records

    def _probe_history_sweep(self) -> list[dict]:
        split, stats = self.load()
        p, c = self.config.probes.history_p, self.config.task.candidates
        sampler = self._sampler()
        strategy = self.config.sampler_spec().label
        mask = frozenset(self.config.task.mask)

        def build(cell, job, rng):
            return build_discrimination_instance(
                job.user, split, stats, p, c, sampler, rng, mask=mask, instance_seed=job.instance_seed
            )

        outcomes = []
        for window in self.config.probes.history_grid:
            self.generate_profiles(self.config.probes.history_generators, ["discrimination"], history_window=window)
            for generator in self.config.probes.history_generators:
                eff = self._effective_generator(generator)
                cell = {
                    "task": "discrimination", "generator": eff, "setting": f"{p}:{c}",
                    "strategy": strategy, "variant": f"h={window}",
                }
                outcomes += self._run_cells(
                    family="discrimination", generator=eff, cells=[cell],
                    seed_tag="history_sweep", build=build,
                    profile_for=self._profile_lookup(generator, "discrimination", window),
                    log_name=f"history_sweep__{eff}__h{window}",
                )
        records = self._write_reports(outcomes, "probe_history_sweep")
        self._plot_csv("history_sweep", records)
        return records

    def _plot_csv(self, name: str, records: list[dict]) -> None:
        header = list(CELL_LABELS) + ["metric", "run", "value"]
        rows = []
        for rec in records:
            for run, value in enumerate(rec["per_run"], start=1):
                rows.append([rec["labels"][k] for k in CELL_LABELS] + [rec["metric"], run, _fmt(value)])
        _write_csv(self.out / "plots" / f"{name}.csv", header, rows)


def _fmt(value) -> str:
    return "" if value is None else repr(float(value))


def _metric_names(family: str) -> tuple[str, ...]:
    return {
        "discrimination": ("overlap",),
        "ranking": ("ndcg@5", "ndcg@10", "hr@3"),
        "rating": ("rmse", "jsd"),
    }[family]


def _key(generator: str, family: str | None, user: str) -> str:
    return f"{generator}/{family or 'any'}/{user}"


def _natural_key(user: str):
    return (0, int(user), "") if user.isdigit() else (1, 0, user)


__all__ = [
    "CELL_LABELS",
    "Experiment",
    "PROBE_KINDS",
    "RunAborted",
    "build_backend",
    "cell_filename",
]
