"""End-to-end pipeline: shared backbone over 7 views, BEV encoding with
history threading across a scene's frames, lane decoding, prediction head.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import tensor as T
from .backbone import (BACKBONE_PRESETS, BackboneConfig, extract_features,
                       feature_channels, init_backbone_params)
from .bev_encoder import BEVGrid, EgoMotion, encode, init_encoder_params
from .heads import head_outputs, init_head_params, predict, total_loss
from .lane_decoder import decode, init_decoder_params, initial_queries


def backbone_config(cfg) -> BackboneConfig:
    base = BACKBONE_PRESETS[cfg.backbone]
    return dataclasses.replace(
        base, input_shape=(cfg.image_channels, cfg.image_height, cfg.image_width))


def init_model_params(cfg, rng) -> dict:
    bcfg = backbone_config(cfg)
    params = init_backbone_params(bcfg, rng)
    init_encoder_params(params, cfg, feature_channels(bcfg), rng)
    init_decoder_params(params, cfg, rng)
    init_head_params(params, cfg, rng)
    return params


def forward_frame(images, cameras, history: BEVGrid | None, motion: EgoMotion,
                  params, cfg):
    """One frame through the whole pipeline.

    Returns (per-decoder-layer HeadOutputs, BEV grid for history threading).
    """
    feats = extract_features(images, backbone_config(cfg), params)
    bev = encode(feats, cameras, history, motion, cfg.n_encoder_layers, params, cfg)
    qsets = decode(initial_queries(params), bev, cfg.n_decoder_layers, params, cfg)
    return [head_outputs(q, params, cfg) for q in qsets], bev


def _frame_motion(scene, t) -> EgoMotion:
    if t == 0:
        return EgoMotion()
    return EgoMotion.from_poses(scene.frames[t - 1].ego_pose, scene.frames[t].ego_pose)


def scene_loss(scene, params, cfg):
    """Mean loss over a scene's frames, threading the history BEV.

    The history is detached between frames: gradients never flow across
    timesteps, only through the current frame's encoder pass.
    """
    history = None
    losses, parts_acc = [], []
    for t, frame in enumerate(scene.frames):
        outs, bev = forward_frame(frame.images, frame.cameras, history,
                                  _frame_motion(scene, t), params, cfg)
        loss_t, parts = total_loss(outs, scene.groundtruth[t], cfg)
        losses.append(loss_t)
        parts_acc.append(parts)
        history = BEVGrid(bev.emb.detach(), bev.spec)
    loss = T.mul(T.tsum(T.stack(losses)), T.Tensor(1.0 / len(losses)))
    breakdown = {k: float(np.mean([p[k] for p in parts_acc])) for k in parts_acc[0]}
    breakdown["loss_total"] = float(loss.data)
    return loss, breakdown


def predict_scene(scene, params, cfg) -> dict:
    """Final-layer predictions per frame, keyed '<scene>/frame_<t>'."""
    history = None
    out = {}
    for t, frame in enumerate(scene.frames):
        feats = extract_features(frame.images, backbone_config(cfg), params)
        bev = encode(feats, frame.cameras, history, _frame_motion(scene, t),
                     cfg.n_encoder_layers, params, cfg)
        q = decode(initial_queries(params), bev, cfg.n_decoder_layers, params, cfg)[-1]
        out[f"{scene.scene_id}/frame_{t}"] = predict(q, params, cfg)
        history = BEVGrid(bev.emb.detach(), bev.spec)
    return out


def groundtruth_by_frame(scenes) -> dict:
    return {f"{s.scene_id}/frame_{t}": gts
            for s in scenes for t, gts in enumerate(s.groundtruth)}
