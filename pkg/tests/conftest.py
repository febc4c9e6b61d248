import random

import pytest

from recsim_profiles.data import (
    Dataset,
    Interaction,
    Item,
    chronological_split,
    compute_item_stats,
    parse_movielens,
)
from recsim_profiles.llm import Gateway, ScriptedBackend
from recsim_profiles.synthetic import HeuristicResponder, bundled_synthetic_paths


class SequenceResponder:
    """Answers per tag from a queue; the last answer repeats once the queue runs dry."""

    def __init__(self, script: dict[str, list[str]]):
        self.script = {k: list(v) for k, v in script.items()}
        self.seen: list = []

    def __call__(self, request):
        self.seen.append(request)
        queue = self.script[request.tag]
        return queue.pop(0) if len(queue) > 1 else queue[0]


def scripted_gateway(table=None, responder=None, **kw) -> Gateway:
    return Gateway(ScriptedBackend(table or {}, responder), **kw)


def make_dataset(histories: dict[str, list[tuple[str, float, int]]], n_items: int = 60) -> Dataset:
    genres = ("Action", "Comedy", "Drama", "Horror")
    items = {
        str(i): Item(str(i), f"Movie {i} (19{50 + i % 50})", (genres[i % 4],)) for i in range(1, n_items + 1)
    }
    by_user = {
        u: [Interaction(u, iid, float(r), ts) for iid, r, ts in events] for u, events in histories.items()
    }
    return Dataset(items, by_user, (1.0, 5.0), name="toy")


@pytest.fixture(scope="session")
def synthetic_dataset():
    rp, mp = bundled_synthetic_paths()
    return parse_movielens(rp, mp, name="synthetic")


@pytest.fixture(scope="session")
def synthetic_split(synthetic_dataset):
    return chronological_split(synthetic_dataset, 0.8)


@pytest.fixture(scope="session")
def synthetic_stats(synthetic_split):
    return compute_item_stats(synthetic_split)


@pytest.fixture
def heuristic_gateway():
    return scripted_gateway(responder=HeuristicResponder())


@pytest.fixture
def toy_split():
    rng = random.Random(3)
    histories = {
        str(u): [(str(rng.randint(1, 60)), rng.randint(1, 5), 1000 + 10 * k) for k in range(12)]
        for u in range(1, 6)
    }
    # dedupe items per user so held-out sets are well defined
    for u, evs in histories.items():
        seen, kept = set(), []
        for iid, r, ts in evs:
            if iid not in seen:
                seen.add(iid)
                kept.append((iid, r, ts))
        histories[u] = kept
    return chronological_split(make_dataset(histories), 0.8)


# ------------------------------------------------------- acceptance verdicts

ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    if rep.when == "setup" and rep.skipped:
        reason = rep.longrepr[2] if isinstance(rep.longrepr, tuple) else str(rep.longrepr)
        ACCEPTANCE_LINES[number] = f"criterion {number:>2} SKIP  {title} ({reason})"
    elif rep.when == "call":
        verdict = "PASS" if rep.passed else "FAIL"
        ACCEPTANCE_LINES[number] = f"criterion {number:>2} {verdict}  {title}" + (f" [{detail}]" if detail else "")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
