"""Synthetic MovieLens-format dataset and a rule-based stand-in for the LLM.

The responder recognises each prompt by its wording (not by request tag),
so it can also sit behind a fake chat-completions HTTP endpoint. Its agent
behaviour is genre-driven: "enjoys X" traits raise matching candidates,
"avoids X" traits sink them; when a decision step is in focus only the
trait kinds relevant to that step are applied, which gives Stage 3
something real to attribute.
"""

from __future__ import annotations

import json
import random
import re
from collections import defaultdict
from pathlib import Path

import httpx

from .llm import PromptRequest

GENRES = (
    "Action", "Comedy", "Drama", "Horror", "Romance",
    "Sci-Fi", "Thriller", "Animation", "Documentary", "Western",
)


def make_synthetic_movielens(n_users: int = 20, n_items: int = 200, seed: int = 7) -> tuple[str, str]:
    """Return (ratings.dat text, movies.dat text) in ML-1M layout."""
    if n_users < 1 or n_items < 1:
        raise ValueError("n_users and n_items must be >= 1")
    rng = random.Random(seed)
    movies = []
    item_genres = {}
    for mid in range(1, n_items + 1):
        genres = rng.sample(GENRES, rng.choice((1, 1, 2, 2, 3)))
        year = rng.randint(1950, 2000)
        movies.append(f"{mid}::Synthetic Film {mid:03d} ({year})::{'|'.join(genres)}")
        item_genres[mid] = genres

    lines = []
    t0 = 956_703_932
    for uid in range(1, n_users + 1):
        liked = rng.sample(GENRES, 2)
        disliked = rng.choice([g for g in GENRES if g not in liked])
        # small catalogues cap the history so the draw always terminates
        n = min(rng.randint(20, 40), n_items)
        pool_liked = [m for m, g in item_genres.items() if set(g) & set(liked)]
        pool_other = [m for m in item_genres if m not in pool_liked]
        chosen = []
        while len(chosen) < n:
            pool = pool_liked if rng.random() < 0.75 else pool_other
            m = rng.choice(pool or pool_liked or pool_other)
            if m not in chosen:
                chosen.append(m)
        t = t0 + uid * 86_400
        for m in chosen:
            g = set(item_genres[m])
            score = 3 + len(g & set(liked)) - 2 * (disliked in g) + rng.choice((-1, 0, 0, 1))
            rating = min(5, max(1, score))
            # occasional equal timestamps exercise the stable tie-break
            t += 0 if rng.random() < 0.1 else rng.randint(60, 7200)
            lines.append(f"{uid}::{m}::{rating}::{t}")
    return "\n".join(lines) + "\n", "\n".join(movies) + "\n"


def write_synthetic_movielens(directory, **kwargs) -> tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ratings, movies = make_synthetic_movielens(**kwargs)
    rp, mp = directory / "ratings.dat", directory / "movies.dat"
    rp.write_text(ratings, encoding="iso-8859-1")
    mp.write_text(movies, encoding="iso-8859-1")
    return rp, mp


def bundled_synthetic_paths() -> tuple[Path, Path]:
    base = Path(__file__).parent / "resources" / "synthetic"
    return base / "ratings.dat", base / "movies.dat"


# ------------------------------------------------------------------ responder

_HISTORY = re.compile(r"^- \[(?P<id>[^\]]+)\] (?P<rest>.*)$", re.M)
_CANDIDATE = re.compile(r"^\[(?P<id>[^\]]+)\](?P<rest>.*)$", re.M)
_GENRE_WORDS = {g.casefold(): g for g in GENRES}


def _genres_in(text: str) -> set[str]:
    low = text.casefold()
    return {g for k, g in _GENRE_WORDS.items() if re.search(rf"(?<![a-z]){re.escape(k)}(?![a-z])", low)}


def _section(text: str, header: str) -> list[str]:
    m = re.search(rf"^{re.escape(header)}[^\n]*\n((?:- [^\n]*\n?)+)", text, re.M)
    return [ln[2:].strip() for ln in m.group(1).splitlines()] if m else []


def _history_stats(text: str) -> dict[str, list[float]]:
    per_genre: dict[str, list[float]] = defaultdict(list)
    for m in _HISTORY.finditer(text):
        rest = m.group("rest")
        r = re.search(r"rated ([\d.]+)", rest)
        rating = float(r.group(1)) if r else 3.0
        for g in _genres_in(rest.split("|", 1)[1] if "|" in rest else ""):
            per_genre[g].append(rating)
    return per_genre


def _likes_avoids(per_genre: dict[str, list[float]]) -> tuple[list[str], list[str]]:
    ranked = sorted(per_genre.items(), key=lambda kv: (-len(kv[1]), kv[0]))
    likes = [g for g, rs in ranked if sum(rs) / len(rs) >= 3.5][:3]
    avoids = sorted(g for g, rs in per_genre.items() if sum(rs) / len(rs) <= 2.5)
    return likes, avoids


def _trait_polarity(line: str) -> tuple[set[str], set[str], float]:
    low = line.casefold()
    genres = _genres_in(line)
    weight = 0.5 if "mildly" in low else 1.0
    if any(w in low for w in ("avoid", "dislike", "not enjoy", "hates")):
        return set(), genres, weight
    if any(w in low for w in ("enjoy", "like", "love", "prefer", "interest", "fan")):
        return genres, set(), weight
    return set(), set(), weight


class HeuristicResponder:
    """Deterministic ``PromptRequest -> text`` function covering every prompt kind."""

    def __call__(self, request: PromptRequest) -> str:
        user = request.user_message
        if "Write short natural-language trait descriptors" in user:
            return self.extract(request)
        if "Raw traits (" in user:
            return self.consolidate(user)
        if "List the ordered decision steps" in user:
            return json.dumps({"steps": [
                {"name": "screen out", "description": "drop items with disliked genres"},
                {"name": "match tastes", "description": "prefer liked genres"},
                {"name": "decide", "description": "produce the answer"},
            ]})
        if "Rewrite this trait so that it" in user:
            return self.perturb(user)
        if "classify the user into exactly one" in user:
            return self.recagent(user)
        if "List the user's tastes" in user:
            return self.agent4rec(user)
        if "Candidates:" in user:
            return self.agent(request)
        return "I cannot help with that."

    # profile generation -------------------------------------------------
    def extract(self, request: PromptRequest) -> str:
        likes, avoids = _likes_avoids(_history_stats(request.user_message))
        traits = [f"enjoys {g} films" for g in likes] + [f"avoids {g} films" for g in avoids]
        variant = (request.request_seed or 0) % 3
        if variant == 1 and likes:
            traits.append(f"likes {likes[0]} movies")
        elif variant == 2:
            traits.append("watches mostly older titles")
        return json.dumps({"traits": traits or ["watches a broad mix of films"]})

    def consolidate(self, user: str) -> str:
        raw = _section(user, "Raw traits")
        out: dict[str, str] = {}
        for t in raw:
            likes, avoids, _ = _trait_polarity(t)
            if likes:
                for g in sorted(likes):
                    out.setdefault(f"like:{g}", f"enjoys {g} films")
            elif avoids:
                for g in sorted(avoids):
                    out.setdefault(f"avoid:{g}", f"avoids {g} films")
            else:
                out.setdefault(t.casefold(), t)
        return json.dumps({"traits": list(out.values())[: max(1, len(raw))]})

    def perturb(self, user: str) -> str:
        trait = re.search(r"^Trait: (.*)$", user, re.M).group(1)
        if "weaker version" in user:
            return json.dumps({"text": f"mildly {trait}"})
        for a, b in (("enjoys", "avoids"), ("avoids", "enjoys"), ("likes", "dislikes"), ("older", "newer")):
            if a in trait:
                return json.dumps({"text": trait.replace(a, b, 1)})
        return json.dumps({"text": f"does not care about {trait}"})

    def recagent(self, user: str) -> str:
        per_genre = _history_stats(user)
        likes, avoids = _likes_avoids(per_genre)
        ratings = [r for rs in per_genre.values() for r in rs]
        mean = sum(ratings) / len(ratings) if ratings else 3.0
        role = "critic" if mean < 3.2 else ("explorer" if len(per_genre) >= 6 else "watcher")
        return json.dumps({
            "personality": "selective" if mean < 3.2 else "easy-going",
            "interests": ", ".join(f"{g} films" for g in likes) or "varied films",
            "behaviour_features": "rates generously" if mean >= 3.8 else "rates cautiously",
            "role": role,
        })

    def agent4rec(self, user: str) -> str:
        likes, avoids = _likes_avoids(_history_stats(user))
        tastes = [{"taste": f"enjoys {g} films", "rationale": f"rated {g} titles highly"} for g in likes]
        tastes += [{"taste": f"avoids {g} films", "rationale": f"rated {g} titles poorly"} for g in avoids]
        return json.dumps({"tastes": tastes or [{"taste": "watches varied films", "rationale": "no clear pattern"}]})

    # simulated agent ----------------------------------------------------
    def _preferences(self, system: str, focus: str | None) -> tuple[dict[str, float], dict[str, float]]:
        likes: dict[str, float] = defaultdict(float)
        avoids: dict[str, float] = defaultdict(float)
        lines = []
        for header, scale in (("Traits:", 1.0), ("Weaker signals:", 0.5), ("User attributes:", 1.0)):
            lines += [(ln, scale) for ln in _section(system, header)]
        for ln, scale in lines:
            lk, av, w = _trait_polarity(ln.split("(because")[0])
            for g in lk:
                likes[g] += scale * w
            for g in av:
                avoids[g] += scale * w
        per_genre = _history_stats(system)
        if per_genre:
            hl, ha = _likes_avoids(per_genre)
            for g in hl:
                likes[g] += 1.0
            for g in ha:
                avoids[g] += 1.0
        if focus in ("hard-filter", "anchor-baseline", "screen-out"):
            likes = defaultdict(float)
        elif focus in ("preference-match", "pairwise-trade-off", "trait-adjustment", "match-tastes"):
            avoids = defaultdict(float)
        return likes, avoids

    def agent(self, request: PromptRequest) -> str:
        user = request.user_message
        focus_m = re.search(r'right after the step "[^"]*" \(([^)]+)\)', user)
        likes, avoids = self._preferences(request.system_message, focus_m.group(1) if focus_m else None)
        block = user.split("Candidates:", 1)[1]
        cands = []
        for pos, m in enumerate(_CANDIDATE.finditer(block)):
            rest = m.group("rest")
            gm = re.search(r"genres: ([^|]*)", rest)
            genres = _genres_in(gm.group(1)) if gm else set()
            score = sum(likes.get(g, 0) for g in genres) - 2 * sum(avoids.get(g, 0) for g in genres)
            rm = re.search(r"rating: ([\d.]+)", rest)
            if rm:
                score += (float(rm.group(1)) - 3) * 0.3
            pm = re.search(r"popularity: (\d+) interactions", rest)
            if pm:
                score += min(int(pm.group(1)), 50) * 0.02
            # slight primacy preference breaks ties
            cands.append((m.group("id"), score - pos * 1e-3, score))
        order = [c[0] for c in sorted(cands, key=lambda c: -c[1])]
        if "Identify them." in user:
            n = int(re.search(r"Exactly (\d+) of", user).group(1))
            return json.dumps({"selected": order[:n]})
        if "Rank the following" in user:
            return json.dumps({"ranking": order})
        ratings = {cid: float(min(5, max(1, round(3 + raw)))) for cid, _, raw in cands}
        return json.dumps({"ratings": ratings})


def fake_chat_transport(responder, calls: list | None = None) -> httpx.MockTransport:
    """An in-process OpenAI-compatible endpoint answering with ``responder``."""

    def handler(http_request: httpx.Request) -> httpx.Response:
        if calls is not None:
            calls.append(http_request)
        if http_request.url.path != "/v1/chat/completions":
            return httpx.Response(404, json={"error": "not found"})
        body = json.loads(http_request.content)
        msgs = {m["role"]: m["content"] for m in body["messages"]}
        req = PromptRequest(
            model_id=body["model"],
            system_message=msgs["system"],
            user_message=msgs["user"],
            temperature=body["temperature"],
            max_tokens=body["max_tokens"],
            request_seed=body.get("seed"),
        )
        text = responder(req)
        return httpx.Response(
            200,
            json={
                "choices": [{"index": 0, "message": {"role": "assistant", "content": text}}],
                "usage": {"prompt_tokens": len(msgs["user"].split()), "completion_tokens": len(text.split())},
            },
        )

    return httpx.MockTransport(handler)
