"""Sequential transformation of an MMDP into a layered single-agent MDP.

The transformed model stacks n layers of virtual states. Layer k holds one
state per (original state, k-prefix of agent actions); agents act one per
layer, intermediate steps are deterministic with zero reward, and the final
layer replays the original joint transition and reward. The per-step discount
becomes gamma**(1/n), so one original step spreads across n virtual steps.

Virtual-state indexing: block offsets offset(k) = S*(A**k - 1)/(A - 1) (k*S
when A == 1), then s-major / prefix-minor within a block, with prefixes coded
in the same mixed radix as joint actions. This makes a layer's rows plain
reshapes of the joint tensors.
"""

from __future__ import annotations

import numpy as np

from .core import (
    SIZE_GUARD,
    CoordinationPolicy,
    DecentralizedPolicySet,
    Mdp,
    Mmdp,
    SizeGuardError,
    digit_table,
    evaluate_policy,
    require_valid,
)


def layer_offsets(n_states, n_agents, n_actions):
    """Start index of each layer plus the total virtual-state count."""
    offsets = []
    total = 0
    for k in range(n_agents):
        offsets.append(total)
        total += n_states * n_actions**k
    return offsets, total


def virtual_state_index(k, s, prefix, n_states, n_agents, n_actions):
    """Index of the layer-k virtual state (s, prefix) in the stacked layout."""
    offsets, _ = layer_offsets(n_states, n_agents, n_actions)
    return offsets[k] + s * n_actions**k + prefix


def sequential_transform(model, size_guard=SIZE_GUARD):
    """Rewrite an MMDP as the layered one-agent-per-step MDP."""
    require_valid(model)
    if model.gamma == 0.0 and model.n_agents > 1:
        raise ValueError("gamma = 0 cannot be split across agent steps")
    s, n, a = model.n_states, model.n_agents, model.n_actions
    offsets, total = layer_offsets(s, n, a)
    if total * a > size_guard:
        raise SizeGuardError(
            f"transformed model has {total} states x {a} actions, "
            f"exceeding the guard ({size_guard})"
        )
    transition = np.zeros((total, a, total))
    reward = np.zeros((total, a))
    for k in range(n - 1):
        width = a**k
        v = offsets[k] + np.arange(s * width)
        u0 = offsets[k + 1] + np.arange(s * width) * a
        for act in range(a):
            transition[v, act, u0 + act] = 1.0
    width = a ** (n - 1)
    last = offsets[n - 1] + np.arange(s * width)
    reward[last, :] = model.reward.reshape(s * width, a)
    final_trans = model.transition.reshape(s * width, a, s)
    for act in range(a):
        transition[last, act, :s] = final_trans[:, act, :]
    initial = np.zeros(total)
    initial[:s] = model.initial_dist
    mdp = Mdp(
        n_states=total,
        n_actions=a,
        transition=transition,
        reward=reward,
        gamma=model.gamma ** (1.0 / n),
        initial_dist=initial,
        horizon=None if model.horizon is None else n * model.horizon,
    )
    return require_valid(mdp)


def _infer_base_states(total, n_agents, n_actions):
    """Recover |S| from the layered state count, or fail loudly."""
    if n_actions == 1:
        s, rem = divmod(total, n_agents)
    else:
        denom = (n_actions**n_agents - 1) // (n_actions - 1)
        s, rem = divmod(total, denom)
    if rem != 0 or s < 1:
        raise ValueError(
            f"{total} states cannot be a {n_agents}-layer stack over "
            f"{n_actions} actions"
        )
    return s


def inverse_transform(mdp, n_agents):
    """Compress n virtual steps back into one joint step.

    Inverts sequential_transform exactly on the tensors; the discount is
    recovered as gamma'**n (exact up to floating-point rounding).
    """
    require_valid(mdp)
    n, a = n_agents, mdp.n_actions
    s = _infer_base_states(mdp.n_states, n, a)
    offsets, total = layer_offsets(s, n, a)
    for k in range(n - 1):
        width = a**k
        v = offsets[k] + np.arange(s * width)
        if np.any(mdp.reward[v, :] != 0.0):
            raise ValueError(f"layer {k} has nonzero intermediate reward")
        u0 = offsets[k + 1] + np.arange(s * width) * a
        expected = np.zeros((s * width, a, total))
        for act in range(a):
            expected[np.arange(s * width), act, u0 + act] = 1.0
        if np.any(mdp.transition[v, :, :] != expected):
            raise ValueError(f"layer {k} transitions are not the one-hot appends")
    width = a ** (n - 1)
    last = offsets[n - 1] + np.arange(s * width)
    final_trans = mdp.transition[last, :, :]
    if s < total and np.any(final_trans[:, :, s:] != 0.0):
        raise ValueError("final layer transitions leave the base-state block")
    if np.any(mdp.initial_dist[s:] != 0.0):
        raise ValueError("initial distribution puts mass on virtual states")
    if mdp.horizon is not None and mdp.horizon % n != 0:
        raise ValueError(f"horizon {mdp.horizon} is not a multiple of {n}")
    model = Mmdp(
        n_states=s,
        n_agents=n,
        n_actions=a,
        transition=final_trans[:, :, :s].reshape(s, a**n, s),
        reward=mdp.reward[last, :].reshape(s, a**n),
        gamma=mdp.gamma**n,
        initial_dist=mdp.initial_dist[:s],
        horizon=None if mdp.horizon is None else mdp.horizon // n,
    )
    return require_valid(model)


# ---------------------------------------------------------------------------
# policy conversion

def lift_policy(pc):
    """Coordination policy -> stochastic policy on the layered MDP (exact copy)."""
    s, n, a = pc.n_states, pc.n_agents, pc.n_actions
    blocks = [pc.tables[k].reshape(s * a**k, a) for k in range(n)]
    return np.concatenate(blocks, axis=0)


def lower_policy(policy, n_agents):
    """Stochastic policy on the layered MDP -> coordination policy (exact copy)."""
    policy = np.asarray(policy, dtype=float)
    total, a = policy.shape
    s = _infer_base_states(total, n_agents, a)
    offsets, _ = layer_offsets(s, n_agents, a)
    tables = []
    for k in range(n_agents):
        width = a**k
        block = policy[offsets[k] : offsets[k] + s * width, :]
        tables.append(block.reshape(s, width, a))
    return CoordinationPolicy(tuple(tables))


def value_relation_check(model, pc):
    """Returns (J on the MMDP, J on the transform, |J_M - gamma^((1-n)/n) J_G|).

    Both sides are evaluated exactly; the residual certifies that the
    transformation rescales values by exactly gamma**((n-1)/n).
    """
    if model.gamma <= 0.0:
        raise ValueError("value relation needs gamma > 0")
    n = model.n_agents
    j_m = evaluate_policy(model, pc)
    j_g = evaluate_policy(sequential_transform(model), lift_policy(pc))
    residual = abs(j_m - model.gamma ** ((1.0 - n) / n) * j_g)
    return j_m, j_g, residual


# ---------------------------------------------------------------------------
# distillation

def greedy_distill(pc, model):
    """Determinize a coordination policy and unroll it into one-hot policies.

    Each conditional row is replaced by its argmax (lowest action index on
    ties), then agent k's action at state s is read off under the earlier
    agents' chosen actions. The product of the outputs plays exactly the
    determinized coordination policy, so their values coincide.
    """
    n, s, a = pc.n_agents, pc.n_states, pc.n_actions
    mu = [np.argmax(tab, axis=2) for tab in pc.tables]
    chosen = np.zeros((n, s), dtype=np.intp)
    for state in range(s):
        prefix = 0
        for k in range(n):
            act = int(mu[k][state, prefix])
            chosen[k, state] = act
            prefix = prefix * a + act
    return DecentralizedPolicySet.deterministic(chosen, a)


def kl_distill(pc, model, steps=4000, lr=None):
    """Fit independent softmax policies to a coordination policy by descending
    the exact cross-entropy, averaged over states.

    The minimizer matches each agent's per-state action marginal under the
    coordination policy's joint distribution, so the fit is exact only when
    that joint is already a product; otherwise this is the best product
    approximation in the cross-entropy sense. Returns the fitted policies and
    the per-step loss trace.
    """
    if steps <= 0:
        raise ValueError("steps must be positive")
    n, s, a = pc.n_agents, pc.n_states, pc.n_actions
    if lr is None:
        lr = float(s)
    if lr <= 0:
        raise ValueError("lr must be positive")
    joint = pc.joint()
    digits = digit_table(n, a)
    marginals = np.zeros((n, s, a))
    for i in range(n):
        for b in range(a):
            marginals[i, :, b] = joint[:, digits[:, i] == b].sum(axis=1)
    logits = np.zeros((n, s, a))
    losses = np.empty(steps)
    for t in range(steps):
        z = logits - logits.max(axis=2, keepdims=True)
        expz = np.exp(z)
        pi = expz / expz.sum(axis=2, keepdims=True)
        log_pi = z - np.log(expz.sum(axis=2, keepdims=True))
        losses[t] = -np.sum(marginals * log_pi) / s
        logits -= lr * (pi - marginals) / s
    z = logits - logits.max(axis=2, keepdims=True)
    expz = np.exp(z)
    pi = expz / expz.sum(axis=2, keepdims=True)
    return DecentralizedPolicySet(pi), losses


def size_report(model):
    """State-action counts before/after transformation plus the 2x bound flag."""
    s, n, a = model.n_states, model.n_agents, model.n_actions
    original = s * a**n
    if a == 1:
        transformed = n * s
    else:
        transformed = s * a * (a**n - 1) // (a - 1)
    return {
        "original_sa": original,
        "transformed_sa": transformed,
        "bound": transformed <= 2 * original,
    }
