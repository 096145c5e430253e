"""Story generation per (stimulus, setting, replicate).

Two backends share one record schema: a live chat-completion endpoint
(HTTPS, bounded concurrency, retry with backoff) and a deterministic local
simulator that writes 40-60-word stories whose lexical diversity is driven
by a configured per-group homogeneity value in (0, 1]. Homogeneity 1.0
collapses a condition to a single story; anything below 1.0 widens the
effective word pools and guarantees distinct text across replicates, so the
downstream similarity machinery has a controllable ground truth.
"""

from __future__ import annotations

import json
import math
import os
import random
import time
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass
from datetime import datetime, timezone
from enum import Enum
from typing import Callable, Collection, Iterator

from .config import BackendConfig, SimulatorConfig
from .core import (
    Gender,
    HomAuditError,
    Knob,
    Race,
    StudyPlan,
    sampling_params,
    setting_repr,
    stable_seed,
)

# Simulated records carry a fixed timestamp so corpora are byte-reproducible.
SIM_EPOCH = "1970-01-01T00:00:00+00:00"


class GenerationError(HomAuditError):
    """Generation could not proceed (bad request, missing seed, simulator misconfig)."""


class AuthError(HomAuditError):
    """Endpoint credential missing or rejected; the whole run aborts."""


class TransportError(HomAuditError):
    """One HTTP exchange failed at the network level (retryable)."""


class BackendKind(str, Enum):
    LIVE = "live"
    SIM = "sim"


class StoryStatus(str, Enum):
    OK = "ok"
    REFUSED = "refused"
    DEGENERATE = "degenerate"
    FAILED = "failed"


def generation_key(
    set_id: int, race: Race, gender: Gender, knob: Knob, setting: float, replicate_index: int
) -> str:
    """Unique corpus key; every store and join in the pipeline uses this string."""
    return "|".join(
        (str(set_id), race.value, gender.value, knob.value, setting_repr(setting), str(replicate_index))
    )


@dataclass(frozen=True)
class GenerationRequest:
    set_id: int
    race: Race
    gender: Gender
    stimulus_ref: str
    knob: Knob
    setting: float
    replicate_index: int
    system_prompt: str
    user_prompt: str
    max_tokens: int
    seed: int | None = None  # study seed; simulator only

    @property
    def key(self) -> str:
        return generation_key(self.set_id, self.race, self.gender, self.knob, self.setting, self.replicate_index)

    def sampling(self, fixed_other: float = 1.0) -> tuple[float, float]:
        return sampling_params(self.knob, self.setting, fixed_other)


@dataclass
class GenerationRecord:
    """One generated story with full provenance; one JSONL line in the corpus."""

    set_id: int
    race: Race
    gender: Gender
    stimulus_ref: str
    knob: Knob
    setting: float
    replicate_index: int
    system_prompt: str
    user_prompt: str
    max_tokens: int
    seed: int | None
    temperature: float
    top_p: float
    story_text: str
    backend: BackendKind
    model_id: str
    created_at: str
    status: StoryStatus

    @property
    def key(self) -> str:
        return generation_key(self.set_id, self.race, self.gender, self.knob, self.setting, self.replicate_index)

    def to_dict(self) -> dict:
        return {
            "set_id": self.set_id,
            "race": self.race.value,
            "gender": self.gender.value,
            "stimulus_ref": self.stimulus_ref,
            "knob": self.knob.value,
            "setting": self.setting,
            "replicate_index": self.replicate_index,
            "system_prompt": self.system_prompt,
            "user_prompt": self.user_prompt,
            "max_tokens": self.max_tokens,
            "seed": self.seed,
            "temperature": self.temperature,
            "top_p": self.top_p,
            "story_text": self.story_text,
            "backend": self.backend.value,
            "model_id": self.model_id,
            "created_at": self.created_at,
            "status": self.status.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GenerationRecord":
        return cls(
            set_id=int(d["set_id"]),
            race=Race(d["race"]),
            gender=Gender(d["gender"]),
            stimulus_ref=str(d["stimulus_ref"]),
            knob=Knob(d["knob"]),
            setting=float(d["setting"]),
            replicate_index=int(d["replicate_index"]),
            system_prompt=str(d["system_prompt"]),
            user_prompt=str(d["user_prompt"]),
            max_tokens=int(d["max_tokens"]),
            seed=None if d.get("seed") is None else int(d["seed"]),
            temperature=float(d["temperature"]),
            top_p=float(d["top_p"]),
            story_text=str(d["story_text"]),
            backend=BackendKind(d["backend"]),
            model_id=str(d["model_id"]),
            created_at=str(d["created_at"]),
            status=StoryStatus(d["status"]),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, separators=(",", ":"))


def classify_story(text: str, word_cap: int) -> StoryStatus:
    """Degenerate-output policy: empty text or a runaway word count is excluded downstream."""
    words = text.split()
    if not words:
        return StoryStatus.DEGENERATE
    if len(words) > word_cap:
        return StoryStatus.DEGENERATE
    return StoryStatus.OK


# ---------------------------------------------------------------------------
# Simulator lexicon
# ---------------------------------------------------------------------------

_NAMES = {
    Gender.MAN: (
        "Marcus Daniel Elijah Theo Victor Samuel Adrian Caleb Jonas Felix "
        "Oscar Rowan Miles Declan Hugo Abel Simon Nathan Jasper Ruben "
        "Amos Cyrus Edgar Foster Gideon Harvey Ivan Jerome Kenji Lionel "
        "Mateo Nolan Orson Pablo Quincy Roland Silas Tobias Ulysses Warren"
    ).split(),
    Gender.WOMAN: (
        "Amara Bella Clara Daphne Elena Freya Greta Hazel Iris Junia "
        "Kira Lena Mira Nadia Opal Paloma Quinn Rosa Selma Tessa "
        "Uma Vera Willa Xenia Yara Zora Alice Brenna Celia Dina "
        "Esther Flora Gemma Helena Ida Joy Karin Leona Maren Nora"
    ).split(),
}

_PROFESSIONS = (
    "teacher carpenter nurse gardener baker librarian fisher tailor potter "
    "engineer florist barber welder printer weaver clerk pilot farmer "
    "musician painter archivist surveyor cobbler chemist locksmith beekeeper "
    "jeweler plumber sailor scribe cartographer tutor mason glassblower "
    "bookbinder falconer machinist botanist astronomer cook courier "
    "shepherd tinsmith violinist watchmaker apiarist stonecutter midwife"
).split()

_ADJECTIVES = (
    "quiet curious patient bold gentle stubborn cheerful meticulous wry "
    "earnest restless thoughtful spirited humble daring careful generous "
    "steady watchful playful reserved candid tireless serene practical "
    "inventive gracious rugged tender shrewd buoyant diligent modest "
    "fearless whimsical sober lively prudent ardent jovial stoic keen "
    "affable sturdy nimble deliberate radiant composed"
).split()

_ACTIVITIES = (
    "painting gardening hiking sketching baking birdwatching carving fishing "
    "knitting juggling stargazing beachcombing foraging rowing cycling "
    "quilting whittling composing brewing pressing framing drumming "
    "welding sculpting archiving budding grafting mending tinkering "
    "mapping labeling sorting polishing binding roasting translating "
    "tuning rehearsing plastering trellising canning salting pickling "
    "threshing spooling braiding glazing etching"
).split()

_PLACES = (
    "market harbor library orchard bakery foundry greenhouse riverbank "
    "observatory lighthouse vineyard workshop pier chapel arcade mill "
    "station terrace courtyard archive quarry meadow boathouse forge "
    "gallery garden cannery depot plaza amphitheater conservatory dock "
    "bazaar atrium pavilion crossroads esplanade cloister granary kiln "
    "promenade switchyard rookery apiary tannery springhouse causeway shoal"
).split()

_OBJECTS = (
    "letter compass notebook lantern violin ledger kettle barometer "
    "paintbrush spade chisel telescope thimble whistle satchel abacus "
    "inkwell harmonica sextant trowel loom anvil quill mortar "
    "timepiece atlas flask easel shears caliper hourglass slate "
    "banjo crucible plumbline stencil bellows awl scythe churn "
    "spindle sickle grindstone adze burin planisphere astrolabe theodolite"
).split()

_TIMES = (
    "dawn dusk autumn winter spring summer morning evening twilight noon "
    "midnight harvest solstice equinox monsoon thaw frost bloom sowing "
    "midsummer midwinter lambing fledging mooncycle ebbtide floodtide "
    "firstlight lamplight afterglow daybreak nightfall cockcrow matins "
    "vespers undertide candletime harvesttide seedtime leaffall snowmelt "
    "stormwatch gloaming high-summer late-autumn early-spring deep-winter foreday shearing"
).split()

_EMOTIONS = (
    "hope pride wonder calm delight resolve warmth gratitude courage "
    "longing mirth patience awe tenderness zeal humor candor relief "
    "curiosity devotion cheer serenity ardor kindness fortitude nostalgia "
    "elation earnestness solace gladness reverence contentment vigor "
    "amity levity poise equanimity fervor goodwill compassion trust "
    "buoyancy steadiness openness bravery composure spark"
).split()

# Uniqueness slot: 64 distinct closers; one is cycled injectively through
# replicates whenever homogeneity < 1, so replicate stories never collide.
_CLOSERS = (
    "clarity purpose balance meaning rhythm grace fortune momentum "
    "belonging renewal stillness promise abundance harmony direction order "
    "wisdom laughter friendship memory courage shelter plenty mercy "
    "kinship wonderment brightness quietude steadfastness welcome bounty ease "
    "assurance gentleness resolve gratitude patience honesty dignity cheer "
    "thankfulness perspective simplicity readiness endurance lightness truth devotion "
    "fellowship generosity humility optimism persistence reflection sincerity strength "
    "sympathy tranquility usefulness vitality warmheartedness wholeness willingness zest"
).split()

# Every template includes {closer} and renders to a fixed 46-48 words.
_TEMPLATES = (
    "{name}, a {adj1} {prof} from the {place}, rose before {time} light and began "
    "{activity}. Neighbors often noticed the {adj2} way {subj} carried an old {object}, "
    "and {subj} treated every stranger with quiet {emotion}. By evening {subj} had "
    "finished, smiling at the {closer} that steady work returns.",
    "Each {time} morning, {name} walked to the {place} with a worn {object} and a head "
    "full of plans. A {adj1} {prof} by trade, {subj} loved {activity} most of all. "
    "Friends praised {poss} {adj2} patience, strangers remembered {poss} {emotion}, and "
    "the town kept a small {closer} for {objp}.",
    "The {place} knew {name} well: the {adj1} {prof} who spent every {time} there, "
    "{activity} until the lamps came on. {subj_cap} kept a {object} nearby, a gift from "
    "years past, and spoke of {emotion} as if it were a craft. People left with a sense "
    "of {closer} after visiting.",
    "{name} spent the {time} near the {place}, content with simple things: {activity}, "
    "a {adj1} smile, and an old {object} that had survived three moves. As a {prof}, "
    "{subj} was known for {adj2} care and genuine {emotion}. Today felt different, "
    "touched by an unexpected {closer} worth keeping.",
    "Before the {place} opened, {name} was already there, {activity} with the focus of "
    "a {adj1} {prof}. A {object} rested beside {objp}, and {time} air carried the smell "
    "of rain. {subj_cap} greeted each visitor with {emotion}, certain that a day begun "
    "with {adj2} effort ends in {closer}.",
    "They called {name} the {adj1} one at the {place}, a {prof} who turned {activity} "
    "into a kind of art. Through every {time}, {subj} kept the same {object} on the "
    "shelf and the same {emotion} in reserve. What remained, after everything, was a "
    "stubborn {closer} and a {adj2} heart.",
)

_POOLS = {
    "adj": _ADJECTIVES,
    "activity": _ACTIVITIES,
    "place": _PLACES,
    "object": _OBJECTS,
    "time": _TIMES,
    "emotion": _EMOTIONS,
}

_PRONOUNS = {
    Gender.MAN: {"subj": "he", "subj_cap": "He", "poss": "his", "objp": "him"},
    Gender.WOMAN: {"subj": "she", "subj_cap": "She", "poss": "her", "objp": "her"},
}


def _effective_size(full: int, homogeneity: float) -> int:
    if homogeneity >= 1.0:
        return 1
    return min(full, 1 + math.ceil((1.0 - homogeneity) * (full - 1)))


class _ConditionLexicon:
    """Restricted word pools for one (group, setting) cell at one homogeneity level."""

    def __init__(self, seed: int, race: Race, gender: Gender, knob: Knob, setting: float, h: float):
        self.pools: dict[str, list[str]] = {}
        for cat, pool in _POOLS.items():
            rng = random.Random(stable_seed(seed, "pool", cat, race.value, gender.value, knob.value, setting_repr(setting)))
            perm = rng.sample(range(len(pool)), len(pool))
            self.pools[cat] = [pool[i] for i in perm[: _effective_size(len(pool), h)]]
        t_rng = random.Random(stable_seed(seed, "templates", race.value, gender.value, knob.value, setting_repr(setting)))
        t_perm = t_rng.sample(range(len(_TEMPLATES)), len(_TEMPLATES))
        self.templates = [_TEMPLATES[i] for i in t_perm[: _effective_size(len(_TEMPLATES), h)]]
        self.closer_base = stable_seed(seed, "closer", race.value, gender.value, knob.value, setting_repr(setting)) % len(_CLOSERS)
        # odd stride -> coprime to the pool size -> injective over replicates
        self.closer_step = (stable_seed(seed, "closerstep", race.value, gender.value, knob.value, setting_repr(setting)) % 32) * 2 + 1
        self.homogeneity = h


_lexicon_cache: dict[tuple, _ConditionLexicon] = {}


def _lexicon(seed: int, race: Race, gender: Gender, knob: Knob, setting: float, h: float) -> _ConditionLexicon:
    cache_key = (seed, race, gender, knob, setting_repr(setting), h)
    lex = _lexicon_cache.get(cache_key)
    if lex is None:
        lex = _ConditionLexicon(seed, race, gender, knob, setting, h)
        if len(_lexicon_cache) > 4096:
            _lexicon_cache.clear()
        _lexicon_cache[cache_key] = lex
    return lex


def simulate_story(request: GenerationRequest, sim: SimulatorConfig) -> str:
    """Deterministic 40-60-word story for one request.

    The text is a pure function of (seed, request key, homogeneity config):
    the per-condition lexicon restricts each slot pool to an effective size
    shrinking with homogeneity, the per-request RNG picks within the
    restricted pools, and the closing noun cycles injectively through
    replicates whenever homogeneity < 1 so replicate texts never collide.
    """
    if request.seed is None:
        raise GenerationError("simulator seed missing")
    h = sim.homogeneity.lookup(request.race, request.gender, request.knob, request.setting)
    lex = _lexicon(request.seed, request.race, request.gender, request.knob, request.setting, h)
    rng = random.Random(stable_seed(request.seed, "story", request.key))

    name = _NAMES[request.gender][(request.set_id * 7 + 3) % len(_NAMES[request.gender])]
    prof = _PROFESSIONS[(request.set_id * 11 + 5) % len(_PROFESSIONS)]
    if h >= 1.0:
        closer = _CLOSERS[lex.closer_base]
    else:
        closer = _CLOSERS[(lex.closer_base + request.replicate_index * lex.closer_step) % len(_CLOSERS)]

    template = lex.templates[rng.randrange(len(lex.templates))]
    fields = {
        "name": name,
        "prof": prof,
        "adj1": rng.choice(lex.pools["adj"]),
        "adj2": rng.choice(lex.pools["adj"]),
        "place": rng.choice(lex.pools["place"]),
        "activity": rng.choice(lex.pools["activity"]),
        "object": rng.choice(lex.pools["object"]),
        "time": rng.choice(lex.pools["time"]),
        "emotion": rng.choice(lex.pools["emotion"]),
        "closer": closer,
        **_PRONOUNS[request.gender],
    }
    return template.format(**fields)


# ---------------------------------------------------------------------------
# Live chat-completion client
# ---------------------------------------------------------------------------


@dataclass
class TransportReply:
    status_code: int
    headers: dict
    body: dict | None


Transport = Callable[[str, dict, dict, float], TransportReply]


def _httpx_transport(url: str, payload: dict, headers: dict, timeout: float) -> TransportReply:
    import httpx

    try:
        resp = httpx.post(url, json=payload, headers=headers, timeout=timeout)
    except httpx.HTTPError as exc:
        raise TransportError(f"transport failure: {exc}") from exc
    try:
        body = resp.json()
    except ValueError:
        body = None
    return TransportReply(status_code=resp.status_code, headers=dict(resp.headers), body=body)


def chat_payload(request: GenerationRequest, model: str, fixed_other: float) -> dict:
    temperature, top_p = request.sampling(fixed_other)
    return {
        "model": model,
        "messages": [
            {"role": "system", "content": request.system_prompt},
            {
                "role": "user",
                "content": [
                    {"type": "text", "text": request.user_prompt},
                    {"type": "image_url", "image_url": {"url": request.stimulus_ref}},
                ],
            },
        ],
        "temperature": temperature,
        "top_p": top_p,
        "max_tokens": request.max_tokens,
    }


def _retry_delay(attempt: int, reply: TransportReply | None, cfg: BackendConfig) -> float:
    if reply is not None:
        retry_after = reply.headers.get("retry-after") or reply.headers.get("Retry-After")
        if retry_after:
            try:
                return min(float(retry_after), cfg.retry_max_delay)
            except ValueError:
                pass
    return min(cfg.retry_base_delay * (2.0**attempt), cfg.retry_max_delay)


def _extract_content(body: dict | None) -> tuple[str | None, str]:
    if not body:
        return None, ""
    choices = body.get("choices") or []
    if not choices:
        return None, ""
    message = choices[0].get("message") or {}
    finish = str(choices[0].get("finish_reason", ""))
    content = message.get("content")
    if message.get("refusal"):
        return None, "content_filter"
    return (content if isinstance(content, str) else None), finish


def live_generate_one(
    request: GenerationRequest,
    cfg: BackendConfig,
    api_key: str,
    fixed_other: float,
    transport: Transport,
    sleep: Callable[[float], None] = time.sleep,
) -> GenerationRecord:
    """One request against the live endpoint, honoring the retry budget.

    Auth rejections abort the run; transport failures and rate limits retry
    with exponential backoff (or the endpoint's retry-after hint); a spent
    budget yields a failed record so the sweep keeps going.
    """
    headers = {"Authorization": f"Bearer {api_key}", "Content-Type": "application/json"}
    payload = chat_payload(request, cfg.model_id, fixed_other)
    temperature, top_p = request.sampling(fixed_other)

    def record(text: str, status: StoryStatus) -> GenerationRecord:
        return GenerationRecord(
            set_id=request.set_id,
            race=request.race,
            gender=request.gender,
            stimulus_ref=request.stimulus_ref,
            knob=request.knob,
            setting=request.setting,
            replicate_index=request.replicate_index,
            system_prompt=request.system_prompt,
            user_prompt=request.user_prompt,
            max_tokens=request.max_tokens,
            seed=request.seed,
            temperature=temperature,
            top_p=top_p,
            story_text=text,
            backend=BackendKind.LIVE,
            model_id=cfg.model_id,
            created_at=datetime.now(timezone.utc).isoformat(timespec="seconds"),
            status=status,
        )

    for attempt in range(cfg.retry_attempts):
        try:
            reply = transport(cfg.base_url, payload, headers, 60.0)
        except TransportError:
            if attempt + 1 < cfg.retry_attempts:
                sleep(_retry_delay(attempt, None, cfg))
            continue
        if reply.status_code in (401, 403):
            raise AuthError(f"endpoint rejected credential (HTTP {reply.status_code})")
        if reply.status_code == 429 or reply.status_code >= 500:
            if attempt + 1 < cfg.retry_attempts:
                sleep(_retry_delay(attempt, reply, cfg))
            continue
        if reply.status_code != 200:
            return record("", StoryStatus.FAILED)
        content, finish = _extract_content(reply.body)
        if content is None or finish == "content_filter":
            return record("", StoryStatus.REFUSED)
        return record(content, classify_story(content, cfg.degenerate_word_cap))
    return record("", StoryStatus.FAILED)


# ---------------------------------------------------------------------------
# Batch driver
# ---------------------------------------------------------------------------


def build_request(item, plan: StudyPlan, seed: int | None) -> GenerationRequest:
    return GenerationRequest(
        set_id=item.stimulus.set_id,
        race=item.stimulus.race,
        gender=item.stimulus.gender,
        stimulus_ref=item.stimulus.stimulus_ref,
        knob=item.knob,
        setting=item.setting,
        replicate_index=item.replicate_index,
        system_prompt=plan.design.system_prompt,
        user_prompt=plan.design.user_prompt,
        max_tokens=plan.design.max_tokens,
        seed=seed,
    )


def generate_batch(
    plan: StudyPlan,
    backend: BackendConfig,
    *,
    sim: SimulatorConfig | None = None,
    existing: Collection[str] = (),
    transport: Transport | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> Iterator[GenerationRecord]:
    """Yield one record per planned generation whose key is not already stored.

    Simulator runs are serial and emit records in plan order (so corpora are
    byte-reproducible); live runs keep up to `backend.max_in_flight` requests
    outstanding and emit in completion order.
    """
    existing_set = frozenset(existing)
    pending = [item for item in plan.items if _plan_key(item) not in existing_set]

    if backend.kind == "sim":
        if sim is None:
            raise GenerationError("simulator backend selected but no [sim] config given")
        fixed_other = plan.sweep.fixed_other
        for item in pending:
            request = build_request(item, plan, sim.seed)
            text = simulate_story(request, sim)
            temperature, top_p = request.sampling(fixed_other)
            yield GenerationRecord(
                set_id=request.set_id,
                race=request.race,
                gender=request.gender,
                stimulus_ref=request.stimulus_ref,
                knob=request.knob,
                setting=request.setting,
                replicate_index=request.replicate_index,
                system_prompt=request.system_prompt,
                user_prompt=request.user_prompt,
                max_tokens=request.max_tokens,
                seed=request.seed,
                temperature=temperature,
                top_p=top_p,
                story_text=text,
                backend=BackendKind.SIM,
                model_id=backend.model_id,
                created_at=SIM_EPOCH,
                status=classify_story(text, backend.degenerate_word_cap),
            )
        return

    api_key = os.environ.get(backend.api_key_env, "")
    if not api_key:
        raise AuthError(f"endpoint credential missing: set ${backend.api_key_env}")
    if not backend.base_url:
        raise GenerationError("live backend selected but backend.base_url is empty")
    send = transport if transport is not None else _httpx_transport
    fixed_other = plan.sweep.fixed_other

    with ThreadPoolExecutor(max_workers=backend.max_in_flight) as pool:
        futures = {
            pool.submit(live_generate_one, build_request(item, plan, None), backend, api_key, fixed_other, send, sleep)
            for item in pending
        }
        try:
            while futures:
                done, futures = wait(futures, return_when=FIRST_COMPLETED)
                for fut in done:
                    yield fut.result()  # AuthError propagates and aborts
        finally:
            for fut in futures:
                fut.cancel()


def _plan_key(item) -> str:
    return generation_key(
        item.stimulus.set_id, item.stimulus.race, item.stimulus.gender, item.knob, item.setting, item.replicate_index
    )
