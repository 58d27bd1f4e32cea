"""Multi-agent advantage actor-critic training for the diffusion MDP.

Every pixel is an agent with the shared FCN policy. Returns propagate
between neighbouring agents through a 3x3 kernel ``omega``:

    G_t = r_t + gamma * (omega (x) G_{t+1}),   G_T = 0

where ``(x)`` is a replicate-padded 3x3 correlation. Stage 1 freezes omega
at the identity (plain per-pixel returns); stage 2 learns it.

The value target of step t is either the one-step bootstrap
``r_t + gamma * omega (x) V(s_{t+1})`` (default) or the full return G_t.
The state after the last step is terminal, so V(s_T) is taken as zero.
Advantages are target minus V(s_t), held constant for the policy gradient.
"""
import csv
import logging
import struct
import threading
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import net as netlib
from .env import N_ACTIONS, EpisodeTrace, reward_map, transition
from .image import _write_atomic, augment as dihedral, shift
from .net import NumericError
from .noise import NoiseSpec

logger = logging.getLogger(__name__)

LOG_FIELDS = ("episode", "mean_reward", "mean_return", "value_loss", "policy_obj", "lr", "wall_ms")
IDENTITY_OMEGA = np.array([[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]])

CHECKPOINT_MAGIC = b"RDCK"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    T: int = 5
    gamma: float = 0.95
    batch_size: int = 64
    patch_size: int = 70
    episodes: int = 60000
    lr0: float = 1e-3
    workers: int = 1
    # run `workers` threads doing A3C-style asynchronous updates
    asynchronous: bool = False
    entropy_beta: float = 0.01
    stage: int = 1
    seed: int = 0
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    augment: bool = False
    advantage: str = "bootstrap"
    omega_grad: str = "both"
    omega_normalize: bool = False
    clip_norm: float = 40.0
    value_coef: float = 0.5
    # rewards are multiplied by this before entering returns and losses
    reward_scale: float = 255.0
    checkpoint_every: int = 0
    # write wall_ms as 0 so identical runs give byte-identical logs
    deterministic_log: bool = False

    def __post_init__(self):
        if not 0 <= self.gamma < 1:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.T < 1:
            raise ValueError("T must be at least 1")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.batch_size < 1 or self.patch_size < 1 or self.episodes < 0 or self.workers < 1:
            raise ValueError("batch_size, patch_size, workers must be positive and episodes >= 0")
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if self.advantage not in ("bootstrap", "return"):
            raise ValueError(f"unknown advantage mode {self.advantage!r}")
        if self.omega_grad not in ("both", "value"):
            raise ValueError(f"unknown omega_grad mode {self.omega_grad!r}")
        if self.entropy_beta < 0:
            raise ValueError("entropy_beta must be nonnegative")


# -- sampling and returns -------------------------------------------------------

def sample_actions(policy, seed):
    """Independent categorical draw per pixel from a (..., 9) probability map.

    ``seed`` is an integer or a numpy Generator.
    """
    policy = np.asarray(policy, dtype=np.float64)
    if policy.shape[-1] != N_ACTIONS:
        raise ValueError(f"policy must end with {N_ACTIONS} actions, got {policy.shape}")
    if (policy < 0).any() or not np.allclose(policy.sum(-1), 1.0, rtol=0, atol=1e-6):
        raise NumericError("policy rows are not normalized probability vectors")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.Generator(np.random.PCG64(seed))
    u = rng.random(policy.shape[:-1])
    cdf = np.cumsum(policy, axis=-1)
    a = (cdf <= u[..., None]).sum(-1)
    return np.minimum(a, N_ACTIONS - 1).astype(np.uint8)


def correlate3(omega, x):
    """sum_{i,j} omega[i+1, j+1] * x[.., p + (i, j)] with replicate padding."""
    out = np.zeros_like(x, dtype=np.float64)
    for i in (-1, 0, 1):
        for j in (-1, 0, 1):
            wij = omega[i + 1, j + 1]
            if wij != 0:
                out += wij * shift(x, i, j)
    return out


def compute_returns(rewards, gamma, omega=IDENTITY_OMEGA):
    """Convolutional discounted returns G_0..G_{T-1} by backward recursion from G_T = 0."""
    rewards = [np.asarray(r, dtype=np.float64) for r in rewards]
    G = np.zeros_like(rewards[-1])
    out = [None] * len(rewards)
    for t in range(len(rewards) - 1, -1, -1):
        G = rewards[t] + gamma * correlate3(omega, G)
        out[t] = G
    return out


def _returns_omega_jacobian(returns, gamma, omega):
    """d G_t / d omega[i, j] for every t, as arrays of shape (3, 3, ...)."""
    T = len(returns)
    jac = [None] * T
    nxt = np.zeros((3, 3) + returns[-1].shape)
    for t in range(T - 1, -1, -1):
        G_next = returns[t + 1] if t + 1 < T else np.zeros_like(returns[-1])
        cur = np.empty_like(nxt)
        for i in range(3):
            for j in range(3):
                cur[i, j] = gamma * (shift(G_next, i - 1, j - 1) + correlate3(omega, nxt[i, j]))
        jac[t] = cur
        nxt = cur
    return jac


def lr_schedule(i, Q, lr0):
    """Linear decay lr0 * (1 - i/Q)."""
    if Q <= 0:
        return lr0
    if not 0 <= i <= Q:
        raise ValueError(f"episode {i} outside 0..{Q}")
    return lr0 * (1.0 - i / Q)


# -- losses ---------------------------------------------------------------------

@dataclass
class _Terms:
    """Everything the two losses need for one (possibly batched) trace."""
    states: np.ndarray      # (T, ..., H, W)
    actions: np.ndarray     # (T, ..., H, W)
    rewards: np.ndarray     # (T, ..., H, W), already scaled
    values: np.ndarray      # V(s_t), (T, ..., H, W)
    logp: np.ndarray        # (T, ..., H, W, 9)
    targets: np.ndarray     # value targets Y_t
    returns: list


def _targets(rewards, values, gamma, omega, mode):
    T = len(rewards)
    returns = compute_returns(rewards, gamma, omega)
    if mode == "return":
        return np.stack(returns), returns
    nxt = [values[t + 1] if t + 1 < T else np.zeros_like(values[0]) for t in range(T)]
    return np.stack([rewards[t] + gamma * correlate3(omega, nxt[t]) for t in range(T)]), returns


def _stack_trace(trace, reward_scale):
    if not trace.rewards:
        raise ValueError("trace has no rewards (ground truth missing)")
    states = np.stack(trace.states)
    actions = np.stack(trace.actions)
    rewards = np.stack(trace.rewards) * reward_scale
    return states, actions, rewards


def _flat(x, lead):
    """Merge the T axis with any batch axis so the net sees (N, H, W)."""
    return x.reshape((-1,) + x.shape[lead:])


def _evaluate(params, states):
    T = states.shape[0]
    logp, values = netlib.forward_logp(params, _flat(states, 1 + states.ndim - 3))
    spatial = states.shape[1:]
    return logp.reshape((T,) + spatial + (N_ACTIONS,)), values.reshape((T,) + spatial)


def _build_terms(params, trace, gamma, omega, mode, reward_scale, cached=None):
    states, actions, rewards = _stack_trace(trace, reward_scale)
    logp, values = cached if cached is not None else _evaluate(params, states)
    targets, returns = _targets(list(rewards), list(values), gamma, omega, mode)
    return _Terms(states, actions, rewards, values, logp, targets, returns)


def _chosen(logp, actions):
    return np.take_along_axis(logp, actions[..., None].astype(np.intp), axis=-1)[..., 0]


def advantages(trace, values, gamma=0.95, omega=IDENTITY_OMEGA, mode="bootstrap", reward_scale=1.0):
    """Advantage maps A_t = Y_t - V(s_t) for t = 0..T-1.

    ``values`` lists V(s_0)..V(s_{T-1}); the state after the last step is terminal.
    """
    rewards = [np.asarray(r) * reward_scale for r in trace.rewards]
    targets, _ = _targets(rewards, list(values), gamma, omega, mode)
    return list(targets - np.stack(values))


def value_loss_grad(params, trace, gamma=0.95, omega=IDENTITY_OMEGA, mode="bootstrap", reward_scale=1.0):
    """sum_t ||Y_t - V(s_t)||_F^2 with Y_t held constant, and its parameter gradient."""
    terms = _build_terms(params, trace, gamma, omega, mode, reward_scale)
    resid = terms.targets - terms.values
    loss = float(np.sum(resid ** 2))
    grads = netlib.backward_logp(params, _flat(terms.states, 1 + terms.states.ndim - 3),
                                 value_grad=_flat(-2.0 * resid, 1 + resid.ndim - 3))
    return loss, grads


def _policy_cotangent(logp, actions, adv, entropy_beta):
    """Cotangent on log-probabilities of the negated objective."""
    chosen = _chosen(logp, actions)
    if not np.all(np.isfinite(chosen)) or np.any(np.exp(chosen) == 0):
        raise NumericError("chosen action has zero probability (log of 0)")
    p = np.exp(logp)
    entropy = -np.sum(p * logp, axis=-1)
    objective = float(np.sum(adv * chosen) + entropy_beta * np.sum(entropy))
    # d(-J)/d logp_k = -A [k = a] + beta p_k (logp_k + 1)
    cot = entropy_beta * p * (logp + 1.0)
    idx = actions[..., None].astype(np.intp)
    np.put_along_axis(cot, idx, np.take_along_axis(cot, idx, axis=-1) - adv[..., None], axis=-1)
    return objective, cot


def policy_loss_grad(params, trace, advs, entropy_beta=0.0):
    """Objective sum_t sum_p A log pi(a) + beta * entropy, and the gradient of its negation.

    Advantages are constants here.
    """
    states, actions, _ = _stack_trace(trace, 1.0)
    logp, _ = _evaluate(params, states)
    adv = np.stack([np.asarray(a, dtype=np.float64) for a in advs])
    objective, cot = _policy_cotangent(logp, actions, adv, entropy_beta)
    lead = 1 + states.ndim - 3
    grads = netlib.backward_logp(params, _flat(states, lead), logp_grad=_flat(cot, lead))
    return objective, grads


def omega_gradient(terms, gamma, omega, mode, value_coef, through_policy):
    """Gradient of value_coef * value loss - policy objective with respect to omega."""
    resid = terms.targets - terms.values
    weight = value_coef * 2.0 * resid
    if through_policy:
        weight = weight - _chosen(terms.logp, terms.actions)
    T = len(terms.rewards)
    if mode == "return":
        jac = _returns_omega_jacobian(terms.returns, gamma, omega)
    else:
        zero = np.zeros_like(terms.values[0])
        jac = []
        for t in range(T):
            nxt = terms.values[t + 1] if t + 1 < T else zero
            jac.append(np.stack([np.stack([gamma * shift(nxt, i, j) for j in (-1, 0, 1)]) for i in (-1, 0, 1)]))
    g = np.zeros((3, 3))
    for t in range(T):
        g += np.tensordot(jac[t], weight[t], axes=weight[t].ndim)
    return g


# -- optimizer ------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, arrays):
        return cls(m={k: np.zeros(np.shape(a)) for k, a in arrays.items()},
                   v={k: np.zeros(np.shape(a)) for k, a in arrays.items()})


def adam_step(arrays, grads, opt, lr):
    """One bias-corrected Adam update. Returns new arrays; ``opt`` is updated in place.

    Non-finite gradients raise before anything is modified.
    """
    for k, g in grads.items():
        if np.shape(g) != np.shape(arrays[k]):
            raise ValueError(f"gradient shape {np.shape(g)} for {k} does not match {np.shape(arrays[k])}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {k}; update aborted")
    t = opt.step + 1
    c1 = 1.0 - opt.beta1 ** t
    c2 = 1.0 - opt.beta2 ** t
    new_arrays, new_m, new_v = {}, {}, {}
    for k, p in arrays.items():
        g = np.asarray(grads[k], dtype=np.float64)
        m = opt.beta1 * opt.m[k] + (1.0 - opt.beta1) * g
        v = opt.beta2 * opt.v[k] + (1.0 - opt.beta2) * g * g
        upd = lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
        new_arrays[k] = (np.asarray(p, dtype=np.float64) - upd).astype(np.asarray(p).dtype)
        new_m[k], new_v[k] = m, v
    opt.m.update(new_m)
    opt.v.update(new_v)
    opt.step = t
    return new_arrays


def clip_global_norm(grads, max_norm):
    norm = float(np.sqrt(sum(float(np.sum(np.square(g))) for g in grads.values())))
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


# -- checkpoints ----------------------------------------------------------------

def save_checkpoint(path, params, omega, opt, stage, episode):
    """Parameter blob followed by a trailer: stage, episode, omega, Adam state."""
    body = [netlib.params_to_bytes(params),
            CHECKPOINT_MAGIC, struct.pack("<IIQ", CHECKPOINT_VERSION, stage, episode),
            np.asarray(omega, dtype="<f8").tobytes()]
    opt = opt or OptimizerState.zeros_like({**params.arrays, "omega": omega})
    body.append(struct.pack("<Q", opt.step))
    for k in list(params.arrays) + ["omega"]:
        m = opt.m.get(k, np.zeros(np.shape(omega) if k == "omega" else params.arrays[k].shape))
        v = opt.v.get(k, np.zeros_like(m))
        body.append(np.asarray(m, dtype="<f8").tobytes())
        body.append(np.asarray(v, dtype="<f8").tobytes())
    blob = b"".join(body)
    _write_atomic(path, blob + struct.pack("<I", zlib.crc32(blob)))


def load_checkpoint(path, expect=None):
    with open(path, "rb") as fh:
        buf = fh.read()
    params, pos = netlib.params_from_bytes(buf, expect)
    if buf[pos:pos + 4] != CHECKPOINT_MAGIC:
        raise netlib.ParamsFormatError(f"{path}: not a training checkpoint")
    if len(buf) < pos + 4 + 16 + 72 + 8 + 4:
        raise netlib.ParamsFormatError(f"{path}: truncated checkpoint trailer")
    version, stage, episode = struct.unpack_from("<IIQ", buf, pos + 4)
    if version != CHECKPOINT_VERSION:
        raise netlib.ParamsFormatError(f"unsupported checkpoint version {version}")
    off = pos + 20
    omega = np.frombuffer(buf, "<f8", 9, off).reshape(3, 3).astype(np.float64)
    off += 72
    (step,) = struct.unpack_from("<Q", buf, off)
    off += 8
    m, v = {}, {}
    for k in list(params.arrays) + ["omega"]:
        shape = (3, 3) if k == "omega" else params.arrays[k].shape
        n = int(np.prod(shape))
        if off + 16 * n + 4 > len(buf):
            raise netlib.ParamsFormatError(f"{path}: truncated optimizer state at {k}")
        m[k] = np.frombuffer(buf, "<f8", n, off).reshape(shape).astype(np.float64)
        off += 8 * n
        v[k] = np.frombuffer(buf, "<f8", n, off).reshape(shape).astype(np.float64)
        off += 8 * n
    (crc,) = struct.unpack_from("<I", buf, off)
    if crc != zlib.crc32(buf[:off]):
        raise netlib.ParamsFormatError(f"{path}: checkpoint checksum mismatch")
    return {"params": params, "omega": omega, "opt": OptimizerState(m, v, step),
            "stage": stage, "episode": episode}


# -- training loop ----------------------------------------------------------------

@dataclass
class TrainResult:
    params: netlib.NetworkParams
    omega: np.ndarray
    opt: OptimizerState
    log: list


def sample_batch(corpus, cfg, rng):
    """Random patches (B, P, P) from the corpus, optionally dihedrally transformed."""
    P = cfg.patch_size
    out = np.empty((cfg.batch_size, P, P))
    for b in range(cfg.batch_size):
        img = corpus[int(rng.integers(len(corpus)))]
        h, w = img.shape
        if h < P or w < P:
            raise TrainingError(f"corpus image {img.shape} smaller than patch size {P}")
        x = int(rng.integers(h - P + 1))
        y = int(rng.integers(w - P + 1))
        patch = img[x:x + P, y:y + P]
        if cfg.augment:
            patch = dihedral(patch, int(rng.integers(8)))
        out[b] = patch
    return out


def rollout(params, f, g, cfg, rng, tape=None):
    """Sampled rollout on a batch; returns the trace and the net outputs (logp, V) per step.

    With a ``tape`` the forward passes are recorded for the later gradient.
    """
    trace = EpisodeTrace(g=g, f=f, clamp=cfg.noise.exceeds_range)
    evaluate = tape.forward_logp if tape is not None else (lambda s: netlib.forward_logp(params, s))
    logps, values = [], []
    u = g
    for _ in range(cfg.T):
        logp, value = evaluate(u)
        a = sample_actions(np.exp(logp), rng)
        nxt = transition(u, a, clamp=trace.clamp)
        trace.states.append(u)
        trace.actions.append(a)
        trace.rewards.append(reward_map(f, u, nxt))
        logps.append(logp)
        values.append(value)
        u = nxt
    trace.final = u
    return trace, (np.stack(logps), np.stack(values))


def episode_gradients(params, omega, trace, cached, cfg, learn_omega, tape=None):
    """Network and omega gradients of value_coef * L_value - J_policy, mean over agents."""
    terms = _build_terms(params, trace, cfg.gamma, omega, cfg.advantage, cfg.reward_scale, cached)
    resid = terms.targets - terms.values
    value_loss = float(np.sum(resid ** 2))
    objective, pcot = _policy_cotangent(terms.logp, terms.actions, resid, cfg.entropy_beta)
    n_agents = resid[0].size
    pcot = pcot / n_agents
    vcot = -2.0 * cfg.value_coef * resid / n_agents
    if tape is not None:
        grads = tape.backward(list(pcot), list(vcot))
    else:
        lead = 1 + terms.states.ndim - 3
        grads = netlib.backward_logp(params, _flat(terms.states, lead),
                                     logp_grad=_flat(pcot, lead), value_grad=_flat(vcot, lead))
    if learn_omega:
        grads["omega"] = omega_gradient(terms, cfg.gamma, omega, cfg.advantage, cfg.value_coef,
                                        through_policy=cfg.omega_grad == "both") / n_agents
    stats = {
        "mean_reward": float(np.mean(np.sum(terms.rewards, axis=0))) / cfg.reward_scale,
        "mean_return": float(np.mean(terms.returns[0])),
        "value_loss": value_loss / n_agents,
        "policy_obj": objective / n_agents,
    }
    return grads, stats


def _episode_rng(cfg, i):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, cfg.stage, i])))


def _noisy_batch(f, cfg, rng):
    g = np.empty_like(f)
    for b in range(f.shape[0]):
        g[b] = cfg.noise.apply(f[b], seed=int(rng.integers(2 ** 63)))
    return g


def _run_episode(params, omega, corpus, cfg, i):
    rng = _episode_rng(cfg, i)
    f = sample_batch(corpus, cfg, rng)
    g = _noisy_batch(f, cfg, rng)
    tape = netlib.Tape(params)
    trace, cached = rollout(params, f, g, cfg, rng, tape)
    return episode_gradients(params, omega, trace, cached, cfg, learn_omega=cfg.stage == 2, tape=tape)


def train(corpus, cfg, params, omega=None, opt=None, log_path=None, checkpoint_path=None, progress=None):
    """Run ``cfg.episodes`` actor-critic episodes; returns a TrainResult.

    Stage 1 keeps omega at the identity. Stage 2 also updates omega with Adam.
    ``log_path`` receives the CSV training log, ``checkpoint_path`` periodic
    checkpoints when ``cfg.checkpoint_every`` > 0.
    """
    if len(corpus) == 0:
        raise TrainingError("empty training corpus")
    params = params.copy()
    omega = IDENTITY_OMEGA.copy() if omega is None or cfg.stage == 1 else np.array(omega, dtype=np.float64)
    opt = opt or OptimizerState.zeros_like({**params.arrays, "omega": omega})
    opt.m.setdefault("omega", np.zeros((3, 3)))
    opt.v.setdefault("omega", np.zeros((3, 3)))
    log = []
    writer = fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(LOG_FIELDS)
    state = {"params": params, "omega": omega}
    lock = threading.Lock()

    def apply(i, grads, stats, t0):
        lr = lr_schedule(i, cfg.episodes, cfg.lr0)
        grads, _ = clip_global_norm(grads, cfg.clip_norm)
        if not all(np.isfinite(v) for v in stats.values()):
            raise TrainingError(f"episode {i}: non-finite loss {stats}")
        arrays = dict(state["params"].arrays)
        if cfg.stage == 2:
            arrays["omega"] = state["omega"]
        else:
            grads.pop("omega", None)
        new = adam_step(arrays, grads, opt, lr)
        if cfg.stage == 2:
            om = new.pop("omega")
            if cfg.omega_normalize:
                om = om / om.sum()
            state["omega"] = om
        state["params"] = netlib.NetworkParams(state["params"].cfg, new)
        wall = 0 if cfg.deterministic_log else int(round((time.perf_counter() - t0) * 1000))
        row = {"episode": i, **stats, "lr": lr, "wall_ms": wall}
        log.append(row)
        if writer is not None:
            writer.writerow([row[k] if k in ("episode", "wall_ms") else repr(float(row[k])) for k in LOG_FIELDS])
        if checkpoint_path and cfg.checkpoint_every and (i + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(checkpoint_path, state["params"], state["omega"], opt, cfg.stage, i + 1)
        if progress is not None:
            progress(row)

    try:
        if cfg.asynchronous and cfg.workers > 1:
            _train_async(corpus, cfg, state, lock, apply)
        else:
            for i in range(cfg.episodes):
                t0 = time.perf_counter()
                grads, stats = _run_episode(state["params"], state["omega"], corpus, cfg, i)
                apply(i, grads, stats, t0)
    except (NumericError, TrainingError) as exc:
        if checkpoint_path:
            dump = f"{checkpoint_path}.failed"
            save_checkpoint(dump, state["params"], state["omega"], opt, cfg.stage, len(log))
            logger.error("training aborted: %s; state dumped to %s", exc, dump)
        raise TrainingError(f"training aborted: {exc}") from exc
    finally:
        if fh is not None:
            fh.close()
    if checkpoint_path:
        save_checkpoint(checkpoint_path, state["params"], state["omega"], opt, cfg.stage, cfg.episodes)
    return TrainResult(state["params"], state["omega"], opt, log)


def _train_async(corpus, cfg, state, lock, apply):
    """Workers compute gradients on a parameter snapshot and apply them under a lock.

    Episode indices are handed out in order, so every gradient was computed
    against parameters at most `workers - 1` updates old. Log order follows
    application order and is not deterministic.
    """
    counter = iter(range(cfg.episodes))
    errors = []

    def worker():
        while not errors:
            with lock:
                i = next(counter, None)
                if i is None:
                    return
                snapshot = state["params"], state["omega"]
            t0 = time.perf_counter()
            try:
                grads, stats = _run_episode(snapshot[0], snapshot[1], corpus, cfg, i)
                with lock:
                    apply(i, grads, stats, t0)
            except Exception as exc:  # surfaced in the main thread
                errors.append(exc)
                return

    threads = [threading.Thread(target=worker, daemon=True) for _ in range(cfg.workers)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    if errors:
        raise errors[0]
