"""Architecture descriptions: layer specs, model graphs and the builders.

A :class:`ModelGraph` is an ordered list of :class:`LayerSpec` plus skip
topology, or a cascade of node graphs. Builders:

* :func:`build_unet` — classic encoder (convolutions + pools) / decoder
  (upsampling + convolutions) with skip concatenations.
* :func:`build_onet` — same shape but the encoder stages use transposed
  convolutions and the decoder stages plain convolutions, with skips linking
  matching stages; depth 5 or 7 resolution stages. ``conventional=True``
  swaps the two block types back to the usual arrangement.
* :func:`build_thetanet` — a three-node cascade of O-Nets whose final node
  may be shared across modality pipelines.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

__all__ = ["LayerSpec", "ModelGraph", "GraphError", "build_unet", "build_onet",
           "build_thetanet"]

LAYER_KINDS = ("conv", "transposed_conv", "activation", "concat_skip", "pool", "upsample")
ACTIVATIONS = ("leaky_relu", "relu", "linear")


class GraphError(ValueError):
    """Raised for inconsistent architecture descriptions."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    activation: str = "linear"
    slope: float = 0.1
    skip_from: int = -1  # layer index whose output a concat_skip appends

    def __post_init__(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise GraphError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv", "transposed_conv") and self.kernel < 1:
            raise GraphError(f"{self.kind} needs a kernel size")
        if self.kind == "activation" and self.activation not in ACTIVATIONS:
            raise GraphError(f"unknown activation {self.activation!r}")

    @property
    def parametric(self) -> bool:
        return self.kind in ("conv", "transposed_conv")

    @property
    def parameter_count(self) -> int:
        if not self.parametric:
            return 0
        return self.kernel**2 * self.in_channels * self.out_channels + self.out_channels

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, doc: dict) -> "LayerSpec":
        return cls(**doc)


@dataclass(frozen=True)
class ModelGraph:
    """One image-to-image network, or a cascade of them (``nodes`` non-empty)."""

    name: str
    layers: tuple[LayerSpec, ...] = ()
    in_channels: int = 1
    out_channels: int = 1
    depth: int = 0            # resolution stages; 0 for cascades
    nodes: tuple["ModelGraph", ...] = ()
    shared_final: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "nodes", tuple(self.nodes))
        if self.nodes:
            if self.layers:
                raise GraphError("a cascade graph must not carry its own layers")
            for a, b in zip(self.nodes[:-1], self.nodes[1:]):
                if a.out_channels != b.in_channels:
                    raise GraphError(
                        f"node output channels {a.out_channels} do not feed "
                        f"node input channels {b.in_channels}"
                    )
            return
        self._validate_channels()

    def _validate_channels(self) -> None:
        channels = self.in_channels
        produced: list[int] = []
        for idx, layer in enumerate(self.layers):
            if layer.kind in ("conv", "transposed_conv"):
                if layer.in_channels != channels:
                    raise GraphError(
                        f"layer {idx} ({layer.kind}) expects {layer.in_channels} "
                        f"channels but receives {channels}"
                    )
                channels = layer.out_channels
            elif layer.kind == "concat_skip":
                if not 0 <= layer.skip_from < idx:
                    raise GraphError(
                        f"layer {idx} concat_skip references layer {layer.skip_from}, "
                        f"which is not an earlier layer"
                    )
                channels += produced[layer.skip_from]
            produced.append(channels)
        if channels != self.out_channels:
            raise GraphError(
                f"graph ends with {channels} channels, declared {self.out_channels}"
            )

    @property
    def is_cascade(self) -> bool:
        return bool(self.nodes)

    def parameter_count(self) -> int:
        if self.is_cascade:
            return sum(n.parameter_count() for n in self.nodes)
        return sum(l.parameter_count for l in self.layers)

    def pool_stages(self) -> int:
        if self.is_cascade:
            return max(n.pool_stages() for n in self.nodes)
        return sum(1 for l in self.layers if l.kind == "pool")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "layers": [l.to_dict() for l in self.layers],
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "depth": self.depth,
            "nodes": [n.to_dict() for n in self.nodes],
            "shared_final": self.shared_final,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelGraph":
        return cls(
            name=doc["name"],
            layers=tuple(LayerSpec.from_dict(d) for d in doc["layers"]),
            in_channels=doc["in_channels"],
            out_channels=doc["out_channels"],
            depth=doc.get("depth", 0),
            nodes=tuple(cls.from_dict(d) for d in doc.get("nodes", [])),
            shared_final=doc.get("shared_final", False),
            meta=doc.get("meta", {}),
        )


def _stage_channels(depth: int, base: int) -> list[int]:
    return [min(base * 2**i, base * 8) for i in range(depth)]


def _block(kind: str, cin: int, cout: int) -> list[LayerSpec]:
    """Two size-preserving 3x3 layers of the given kind, each activated."""
    return [
        LayerSpec(kind=kind, in_channels=cin, out_channels=cout, kernel=3, padding=1),
        LayerSpec(kind="activation", activation="leaky_relu"),
        LayerSpec(kind=kind, in_channels=cout, out_channels=cout, kernel=3, padding=1),
        LayerSpec(kind="activation", activation="leaky_relu"),
    ]


def _encoder_decoder(
    name: str,
    depth: int,
    base_channels: int,
    in_channels: int,
    encoder_kind: str,
    decoder_kind: str,
) -> ModelGraph:
    if depth < 2:
        raise GraphError(f"depth must be at least 2, got {depth}")
    chans = _stage_channels(depth, base_channels)
    layers: list[LayerSpec] = []
    skip_sources: list[int] = []
    current = in_channels
    for i in range(depth - 1):
        layers.extend(_block(encoder_kind, current, chans[i]))
        skip_sources.append(len(layers) - 1)
        layers.append(LayerSpec(kind="pool"))
        current = chans[i]
    layers.extend(_block(encoder_kind, current, chans[depth - 1]))
    current = chans[depth - 1]
    for i in range(depth - 2, -1, -1):
        layers.append(LayerSpec(kind="upsample"))
        layers.append(LayerSpec(kind="concat_skip", skip_from=skip_sources[i]))
        layers.extend(_block(decoder_kind, current + chans[i], chans[i]))
        current = chans[i]
    layers.append(
        LayerSpec(kind="conv", in_channels=current, out_channels=in_channels, kernel=1)
    )
    return ModelGraph(
        name=name,
        layers=tuple(layers),
        in_channels=in_channels,
        out_channels=in_channels,
        depth=depth,
        meta={"base_channels": base_channels},
    )


def build_unet(depth: int = 5, base_channels: int = 16, in_channels: int = 1) -> ModelGraph:
    """Encoder convolutions + pools, decoder upsamples + convolutions, skips."""
    return _encoder_decoder(f"unet{depth}", depth, base_channels, in_channels,
                            encoder_kind="conv", decoder_kind="conv")


def build_onet(
    depth: int = 5,
    base_channels: int = 16,
    in_channels: int = 1,
    conventional: bool = False,
) -> ModelGraph:
    """Encoder of transposed-convolution blocks, decoder of convolution blocks.

    Skips concatenate each encoder stage onto the matching decoder stage.
    Only depths 5 and 7 are valid. ``conventional=True`` swaps the block
    kinds to the usual arrangement (convolutions encode, transposed
    convolutions decode).
    """
    if depth not in (5, 7):
        raise GraphError(f"O-Net depth must be 5 or 7, got {depth}")
    enc, dec = ("transposed_conv", "conv") if not conventional else ("conv", "transposed_conv")
    return _encoder_decoder(f"onet{depth}", depth, base_channels, in_channels,
                            encoder_kind=enc, decoder_kind=dec)


def build_thetanet(node_graphs, shared_final: bool = True) -> ModelGraph:
    """Sequential cascade of exactly three O-Net nodes.

    With ``shared_final`` set, node 3 is one parameter set referenced by every
    modality pipeline trained through :func:`phasenano.nn.train.train_thetanet`.
    """
    nodes = tuple(node_graphs)
    if len(nodes) != 3:
        raise GraphError(f"a theta-net cascade needs exactly 3 nodes, got {len(nodes)}")
    nodes = tuple(replace(n, name=f"node{i+1}-{n.name}") for i, n in enumerate(nodes))
    return ModelGraph(
        name="thetanet",
        nodes=nodes,
        in_channels=nodes[0].in_channels,
        out_channels=nodes[-1].out_channels,
        shared_final=shared_final,
    )
