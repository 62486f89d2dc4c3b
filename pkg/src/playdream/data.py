"""Play streams on disk plus the samplers that feed both training phases.

Stream files are little-endian binary: a fixed header (magic, version, shapes,
seed), then one length-prefixed float32 record per step holding the flattened
(static, ego, proprio, action) payload, then the demonstrator's completion
events. An index file in the same directory maps ids to files and lengths.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import env as E

MAGIC = b"PLYSTRM1"
VERSION = 1


class StreamFormatError(RuntimeError):
    """Corrupt or incompatible stream file."""


@dataclass
class PlayStream:
    stream_id: str
    seed: int
    static: np.ndarray   # [T, H, W, 3] float32
    ego: np.ndarray      # [T, h, w, 3]
    proprio: np.ndarray  # [T, 3]
    actions: np.ndarray  # [T, A], the action taken at each step
    events: list         # [(obs index, task index)]

    def __post_init__(self):
        T = len(self.static)
        if not (len(self.ego) == len(self.proprio) == len(self.actions) == T):
            raise ValueError("stream fields have mismatched lengths")

    @property
    def length(self) -> int:
        return len(self.static)

    def prev_actions(self) -> np.ndarray:
        """Actions aligned to the *preceding* step; zeros at the stream head."""
        out = np.zeros_like(self.actions)
        out[1:] = self.actions[:-1]
        return out


# -- collection --------------------------------------------------------------


def collect_stream(stream_id: str, seed: int, n_steps: int, static_size: int = 16,
                   ego_size: int = 8, action_dim: int = 3, noise: float = 0.3) -> PlayStream:
    """Run the scripted demonstrator for n_steps and record everything."""
    env = E.PlayTable(static_size, ego_size, action_dim)
    obs = env.reset(seed)
    player = E.ScriptedPlayer(env, np.random.default_rng((seed, 0xD0)), noise=noise)
    static = np.empty((n_steps, static_size, static_size, 3), dtype=np.float32)
    ego = np.empty((n_steps, ego_size, ego_size, 3), dtype=np.float32)
    proprio = np.empty((n_steps, 3), dtype=np.float32)
    actions = np.empty((n_steps, action_dim), dtype=np.float32)
    for t in range(n_steps):
        static[t], ego[t], proprio[t] = obs.static, obs.ego, obs.proprio
        # quantize before stepping so replay from the stored float32 is exact
        a = E.Action.clip(player.act()).astype(np.float32)
        actions[t] = a
        obs = env.step(a)
        player.observe_step()
    events = [(s, k) for s, k in player.events if s < n_steps]
    return PlayStream(stream_id, seed, static, ego, proprio, actions, events)


# -- on-disk store -----------------------------------------------------------


class StreamStore:
    """Directory of .strm files plus an index.json with ids and lengths."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.index_path = self.root / "index.json"
        self.index = {}
        if self.index_path.exists():
            self.index = json.loads(self.index_path.read_text())

    def ids(self):
        return sorted(self.index)

    def add(self, stream: PlayStream):
        if stream.stream_id in self.index:
            raise ValueError(f"stream id {stream.stream_id!r} already stored")
        path = self.root / f"{stream.stream_id}.strm"
        path.write_bytes(encode_stream(stream))
        self.index[stream.stream_id] = {"file": path.name, "length": stream.length,
                                        "events": len(stream.events)}
        self.index_path.write_text(json.dumps(self.index, indent=1, sort_keys=True))

    def get(self, stream_id: str) -> PlayStream:
        if stream_id not in self.index:
            raise KeyError(f"no stream {stream_id!r}")
        return decode_stream((self.root / self.index[stream_id]["file"]).read_bytes(),
                             stream_id)

    def load_all(self) -> list:
        return [self.get(i) for i in self.ids()]


def encode_stream(s: PlayStream) -> bytes:
    H, W = s.static.shape[1:3]
    h, w = s.ego.shape[1:3]
    parts = [MAGIC,
             struct.pack("<IIiiiiiiq", VERSION, s.length, H, W, h, w,
                         s.proprio.shape[1], s.actions.shape[1], s.seed)]
    for t in range(s.length):
        payload = np.concatenate([s.static[t].reshape(-1), s.ego[t].reshape(-1),
                                  s.proprio[t], s.actions[t]]).astype("<f4")
        raw = payload.tobytes()
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
    parts.append(struct.pack("<I", len(s.events)))
    for step, task in s.events:
        parts.append(struct.pack("<II", step, task))
    return b"".join(parts)


def decode_stream(buf: bytes, stream_id: str) -> PlayStream:
    if buf[:8] != MAGIC:
        raise StreamFormatError("bad magic")
    off = 8
    try:
        version, T, H, W, h, w, P, A, seed = struct.unpack_from("<IIiiiiiiq", buf, off)
    except struct.error as e:
        raise StreamFormatError(f"truncated header: {e}") from None
    if version != VERSION:
        raise StreamFormatError(f"unsupported version {version}")
    off += struct.calcsize("<IIiiiiiiq")
    rec_len = (H * W * 3 + h * w * 3 + P + A) * 4
    static = np.empty((T, H, W, 3), dtype=np.float32)
    ego = np.empty((T, h, w, 3), dtype=np.float32)
    proprio = np.empty((T, P), dtype=np.float32)
    actions = np.empty((T, A), dtype=np.float32)
    for t in range(T):
        if off + 4 > len(buf):
            raise StreamFormatError(f"truncated at record {t}")
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        if n != rec_len or off + n > len(buf):
            raise StreamFormatError(f"record {t}: length {n}, expected {rec_len}")
        payload = np.frombuffer(buf, dtype="<f4", count=n // 4, offset=off)
        off += n
        i = 0
        for arr, size in ((static, H * W * 3), (ego, h * w * 3), (proprio, P), (actions, A)):
            arr[t] = payload[i : i + size].reshape(arr.shape[1:])
            i += size
    (n_ev,) = struct.unpack_from("<I", buf, off)
    off += 4
    events = []
    for _ in range(n_ev):
        step, task = struct.unpack_from("<II", buf, off)
        off += 8
        events.append((step, task))
    return PlayStream(stream_id, seed, static, ego, proprio, actions, events)


# -- annotation --------------------------------------------------------------


@dataclass
class LanguageAnnotation:
    stream_id: str
    start: int
    end: int          # exclusive
    task: int
    text: str
    tokens: np.ndarray


def candidate_windows(streams: list, max_len: int) -> int:
    """Number of max-length window start positions across all streams."""
    return sum(max(0, s.length - max_len + 1) for s in streams)


def annotate(streams: list, fraction: float, seed: int,
             min_len: int = 20, max_len: int = 32) -> list:
    """Attach paraphrased instructions to windows around completion events.

    The target count is round(fraction * candidate_windows); if that exceeds
    the number of completion events, every event gets one annotation. Each
    annotation's span contains its event.
    """
    rng = np.random.default_rng((seed, 0xA0))
    events = []
    for s in streams:
        for step, task in s.events:
            events.append((s, step, task))
    target = int(round(fraction * candidate_windows(streams, max_len)))
    if target <= 0 or not events:
        return []
    if target >= len(events):
        chosen = list(range(len(events)))
    else:
        chosen = list(rng.choice(len(events), size=target, replace=False))
    out = []
    for i in sorted(chosen):
        s, step, task = events[i]
        length = int(rng.integers(min_len, max_len + 1))
        end = min(step + int(rng.integers(2, 6)) + 1, s.length)
        start = max(end - length, 0)
        if not (start <= step < end):  # event near the stream head
            end = min(start + length, s.length)
        instr = E.sample_instruction(E.TASKS[task], rng)
        out.append(LanguageAnnotation(s.stream_id, start, end, task, instr.text,
                                      instr.tokens))
    return out


def save_annotations(path, annotations: list):
    rows = [{"stream": a.stream_id, "start": a.start, "end": a.end, "task": a.task,
             "text": a.text} for a in annotations]
    Path(path).write_text("\n".join(json.dumps(r, sort_keys=True) for r in rows) + "\n")


def load_annotations(path) -> list:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        r = json.loads(line)
        out.append(LanguageAnnotation(r["stream"], r["start"], r["end"], r["task"],
                                      r["text"], E.tokenize(r["text"])))
    return out


# -- samplers ----------------------------------------------------------------


def sample_wm_sequences(streams: list, batch: int, length: int, zeta: float, rng):
    """Uniform (stream, start) slices plus i.i.d. Bernoulli(zeta) reset flags.

    Returns dict of arrays: static/ego/proprio [B,L,...], prev_actions [B,L,A],
    resets [B,L] float. prev_actions[t] is the action *leading into* step t.
    """
    usable = [s for s in streams if s.length >= length]
    if not usable:
        raise ValueError(f"no stream of length >= {length}")
    out = {k: [] for k in ("static", "ego", "proprio", "prev_actions")}
    for _ in range(batch):
        s = usable[rng.integers(len(usable))]
        start = int(rng.integers(0, s.length - length + 1))
        sl = slice(start, start + length)
        out["static"].append(s.static[sl])
        out["ego"].append(s.ego[sl])
        out["proprio"].append(s.proprio[sl])
        out["prev_actions"].append(s.prev_actions()[sl])
    batch_out = {k: np.stack(v) for k, v in out.items()}
    batch_out["resets"] = (rng.random((batch, length)) < zeta).astype(np.float32)
    return batch_out


def sample_agent_windows(streams: list, annotations: list, batch: int,
                         lang_ratio: float, rng, min_len: int = 20, max_len: int = 32):
    """Mixed goal-modality windows, padded to max_len with a validity mask.

    Each slot is annotated (language goal) with probability lang_ratio, else a
    random window whose goal is its own final step (hindsight relabel). Output
    adds mask [B,L], lengths [B], is_lang [B], tokens [B,MAX_TOKENS].
    """
    by_id = {s.stream_id: s for s in streams}
    usable = [s for s in streams if s.length >= max_len]
    if not usable:
        raise ValueError(f"no stream of length >= {max_len}")
    L = max_len
    shapes = usable[0]
    B = batch
    static = np.zeros((B, L) + shapes.static.shape[1:], dtype=np.float32)
    ego = np.zeros((B, L) + shapes.ego.shape[1:], dtype=np.float32)
    proprio = np.zeros((B, L, shapes.proprio.shape[1]), dtype=np.float32)
    prev_actions = np.zeros((B, L, shapes.actions.shape[1]), dtype=np.float32)
    actions = np.zeros((B, L, shapes.actions.shape[1]), dtype=np.float32)
    mask = np.zeros((B, L), dtype=np.float32)
    lengths = np.zeros(B, dtype=np.int64)
    is_lang = np.zeros(B, dtype=bool)
    tokens = np.zeros((B, E.MAX_TOKENS), dtype=np.int64)
    for b in range(B):
        use_lang = bool(annotations) and rng.random() < lang_ratio
        if use_lang:
            a = annotations[rng.integers(len(annotations))]
            s = by_id[a.stream_id]
            start, end = a.start, a.end
            is_lang[b] = True
            tokens[b] = a.tokens
        else:
            s = usable[rng.integers(len(usable))]
            ln = int(rng.integers(min_len, max_len + 1))
            start = int(rng.integers(0, s.length - ln + 1))
            end = start + ln
        n = end - start
        sl = slice(start, end)
        static[b, :n] = s.static[sl]
        ego[b, :n] = s.ego[sl]
        proprio[b, :n] = s.proprio[sl]
        prev_actions[b, :n] = s.prev_actions()[sl]
        actions[b, :n] = s.actions[sl]
        mask[b, :n] = 1.0
        lengths[b] = n
    return {"static": static, "ego": ego, "proprio": proprio,
            "prev_actions": prev_actions, "actions": actions, "mask": mask,
            "lengths": lengths, "is_lang": is_lang, "tokens": tokens}
