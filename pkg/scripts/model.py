"""The full DF2AM network and its checkpoint file."""

import logging
from dataclasses import asdict
from pathlib import Path
from typing import Literal, Optional

import torch
from torch import nn

from backbone import (
    BNMode, EncoderConfig, Modality, TwoStreamEncoder, classify, encode, gap,
    init_uniform, make_batchnorm, make_classifier,
)
from dff import AttentionWeights, DFFConfig, dual_fuse, local_attention_fuse, pap
from diff_core import DTYPE, ParamStore, check_shape
from errors import CheckpointError
from losses import BatchOutputs

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "df2am-checkpoint/1"

Embedding = Literal["fused", "global"]


class DF2AMModel(nn.Module):
    """Encoder, part attention, fusion BN and the two identity heads.

    ``classifier`` scores global embeddings for the baseline loss;
    ``dff_classifier`` scores fused embeddings for L_D. Both are shared by
    the two modalities.
    """

    def __init__(self, encoder_config: EncoderConfig, dff_config: DFFConfig, seed: int = 0):
        super().__init__()
        encoder_config.validate()
        dff_config.validate(encoder_config.output_shape[1])
        self.encoder_config = encoder_config
        self.dff_config = dff_config
        self.encoder = TwoStreamEncoder(encoder_config)
        self.attention = AttentionWeights(dff_config.parts, dff_config.shared_attention)
        self.bn = make_batchnorm(encoder_config)
        self.classifier = make_classifier(encoder_config.embedding_dim, encoder_config.identity_count)
        self.dff_classifier = make_classifier(encoder_config.embedding_dim, encoder_config.identity_count)
        init_uniform(self, torch.Generator().manual_seed(seed))

    def params(self) -> ParamStore:
        return ParamStore.from_module(self)

    def _branches(self, images: torch.Tensor, modality: Modality) -> tuple[torch.Tensor, torch.Tensor]:
        f = encode(images, modality, self.encoder)
        f_star = local_attention_fuse(pap(f, self.dff_config.parts), self.attention(modality))
        return gap(f), f_star

    def forward_batch(self, images: torch.Tensor, mode: BNMode = "train") -> BatchOutputs:
        """Forward a (2K*, C0, H0, W0) batch ordered RGB block then IR block.

        BN runs once over all 2K* global embeddings.
        """
        k = images.shape[0] // 2
        check_shape("batch size", (2 * k,), images.shape[:1])
        global_rgb, star_rgb = self._branches(images[:k], Modality.RGB)
        global_ir, star_ir = self._branches(images[k:], Modality.IR)
        fused = dual_fuse(
            torch.cat([global_rgb, global_ir]), torch.cat([star_rgb, star_ir]), self.bn, mode
        )
        return BatchOutputs(
            global_rgb=global_rgb,
            global_ir=global_ir,
            probs_rgb=classify(global_rgb, self.classifier),
            probs_ir=classify(global_ir, self.classifier),
            fused_probs_rgb=classify(fused[:k], self.dff_classifier),
            fused_probs_ir=classify(fused[k:], self.dff_classifier),
        )

    @torch.no_grad()
    def embed(self, images: torch.Tensor, modality: Modality, embedding: Embedding = "fused") -> torch.Tensor:
        """Test-time embeddings: f~ with running-stat BN, or the raw f^g."""
        global_embedding, f_star = self._branches(images, modality)
        if embedding == "global":
            return global_embedding
        return dual_fuse(global_embedding, f_star, self.bn, "infer")


def save_checkpoint(path: Path, model: DF2AMModel, extra: Optional[dict] = None) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "encoder": asdict(model.encoder_config),
        "dff": asdict(model.dff_config),
        "state": model.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, path)
    logger.debug("saved checkpoint %s", path)
    return path


def load_checkpoint(path: Path, input_shape: Optional[tuple[int, int, int]] = None) -> tuple[DF2AMModel, dict]:
    """Rebuild the model from ``path``; ``input_shape`` guards against data/config mismatch."""
    try:
        payload = torch.load(path, weights_only=True)
    except (OSError, RuntimeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unsupported checkpoint format {payload.get('format')!r}")

    raw = dict(payload["encoder"])
    for key in ("input_shape", "stem_widths", "trunk_widths"):
        raw[key] = tuple(raw[key])
    encoder_config = EncoderConfig(**raw)
    if input_shape is not None and tuple(input_shape) != encoder_config.input_shape:
        raise CheckpointError(
            f"{path}: checkpoint expects images {encoder_config.input_shape}, data has {tuple(input_shape)}"
        )
    model = DF2AMModel(encoder_config, DFFConfig(**payload["dff"]))
    try:
        model.load_state_dict(payload["state"])
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: state does not fit the stored config: {exc}") from exc
    return model.to(DTYPE), payload.get("extra", {})
