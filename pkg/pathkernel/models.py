# pathkernel/models.py
"""
Study models over a flat parameter vector with a named-component registry

Kinds:
- modadd_transformer: one attention + MLP block on [a, +, b, mod p =] tokens
- mlp: ReLU classifier for the synthetic binary data
- linear: f(x) = x W + b with raw outputs (constant Jacobian)
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from pathkernel.autodiff import ComputeGraph, Layout, Node
from pathkernel.config import ModelSpec
from pathkernel.error_handling import InvalidInputError, ShapeError, UnknownComponentError

logger = logging.getLogger(__name__)

# component -> ordered tensors (name, shape)
TensorPlan = List[Tuple[str, List[Tuple[str, Tuple[int, ...]]]]]


# Independent Philox streams per purpose, keyed (stream << 64) + seed
STREAM_INIT = 0
STREAM_BATCHES = 1
STREAM_DATASET = 2
STREAM_PRUNE = 3


def rng_for(seed: int, stream: int = STREAM_INIT) -> np.random.Generator:
    """Counter-based Philox generator; every seeded draw in the package goes through here"""
    if seed < 0:
        raise InvalidInputError(f"seed must be non-negative, got {seed}")
    return np.random.Generator(np.random.Philox(key=(stream << 64) + int(seed)))


def tensor_plan(spec: ModelSpec) -> TensorPlan:
    if spec.kind == "modadd_transformer":
        d, v, m = spec.d_model, spec.vocab_size, spec.d_mlp
        return [
            ("embedding", [("embedding.weight", (v, d))]),
            ("att_encoders", [("attn.W_Q", (d, d)), ("attn.W_K", (d, d)), ("attn.W_V", (d, d))]),
            ("att_decoders", [("attn.W_O", (d, d))]),
            ("linear1", [("linear1.weight", (d, m)), ("linear1.bias", (m,))]),
            ("linear2", [("linear2.weight", (m, d)), ("linear2.bias", (d,))]),
            ("decoder", [("decoder.weight", (d, v)), ("decoder.bias", (v,))]),
        ]
    if spec.kind == "linear":
        return [("decoder", [("decoder.weight", (spec.input_dim, spec.output_dim)),
                             ("decoder.bias", (spec.output_dim,))])]
    plan: TensorPlan = []
    fan_in = spec.input_dim
    for i, width in enumerate(spec.hidden_dims):
        name = f"linear{i + 1}"
        plan.append((name, [(f"{name}.weight", (fan_in, width)), (f"{name}.bias", (width,))]))
        fan_in = width
    plan.append(("decoder", [("decoder.weight", (fan_in, spec.output_dim)),
                             ("decoder.bias", (spec.output_dim,))]))
    return plan


@dataclass
class ParamVector:
    """Flat float64 parameter vector plus the registry partitioning it into components"""

    data: np.ndarray
    registry: List[Tuple[str, int, int]]
    tensors: Layout = field(default_factory=dict)

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def component_names(self) -> List[str]:
        return [name for name, _, _ in self.registry]

    def component_range(self, name: str) -> Tuple[int, int]:
        for comp, start, stop in self.registry:
            if comp == name:
                return start, stop
        raise UnknownComponentError(name, self.component_names)

    def component(self, name: str) -> np.ndarray:
        start, stop = self.component_range(name)
        return self.data[start:stop]

    def with_data(self, data: np.ndarray) -> "ParamVector":
        data = np.asarray(data, dtype=np.float64)
        if data.shape != self.data.shape:
            raise ShapeError(f"parameter vector of shape {data.shape} does not fit registry of size {self.size}")
        return ParamVector(data=data, registry=list(self.registry), tensors=dict(self.tensors))

    def check_partition(self):
        """Ranges must be contiguous, disjoint, uniquely named and cover [0, D)"""
        expected = 0
        names = set()
        for name, start, stop in self.registry:
            if name in names:
                raise ShapeError(f"duplicate component name '{name}'")
            if start != expected or stop <= start:
                raise ShapeError(f"component '{name}' range [{start}, {stop}) breaks the partition at {expected}")
            names.add(name)
            expected = stop
        if expected != self.size:
            raise ShapeError(f"registry covers {expected} of {self.size} parameters")


class Model:
    """Graph builder and evaluation helpers for one ModelSpec"""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.plan = tensor_plan(spec)
        self.layout: Layout = {}
        self.registry: List[Tuple[str, int, int]] = []
        offset = 0
        for component, tensors in self.plan:
            start = offset
            for name, shape in tensors:
                self.layout[name] = (offset, shape)
                offset += int(np.prod(shape))
            self.registry.append((component, start, offset))
        self.size = offset

    @property
    def n_outputs(self) -> int:
        return self.spec.n_outputs

    def wrap(self, data: np.ndarray) -> ParamVector:
        params = ParamVector(data=np.asarray(data, dtype=np.float64), registry=list(self.registry),
                             tensors=dict(self.layout))
        params.check_partition()
        return params

    def init_params(self, seed: int) -> ParamVector:
        """Weights ~ Normal(0, 1/sqrt(fan_in)) with fan_in = rows of the matrix; biases zero"""
        rng = rng_for(seed)
        data = np.zeros(self.size)
        for _, tensors in self.plan:
            for name, shape in tensors:
                offset, _ = self.layout[name]
                size = int(np.prod(shape))
                if len(shape) == 2:
                    data[offset:offset + size] = rng.standard_normal(size) / np.sqrt(shape[0])
        return self.wrap(data)

    # ------------------------------------------------------------------
    # graphs
    # ------------------------------------------------------------------

    def _check_inputs(self, inputs: np.ndarray) -> np.ndarray:
        if self.spec.kind == "modadd_transformer":
            inputs = np.asarray(inputs)
            if inputs.ndim != 2 or inputs.shape[1] != 4:
                raise ShapeError(f"transformer inputs must be (B, 4) token ids, got {inputs.shape}")
            if not np.issubdtype(inputs.dtype, np.integer):
                raise InvalidInputError("transformer inputs must be integer token ids")
            return inputs
        inputs = np.asarray(inputs, dtype=np.float64)
        if inputs.ndim != 2 or inputs.shape[1] != self.spec.input_dim:
            raise ShapeError(f"inputs must be (B, {self.spec.input_dim}), got {inputs.shape}")
        return inputs

    def graph(self, flat: np.ndarray, inputs: np.ndarray, single: bool = False) -> Tuple[ComputeGraph, Node]:
        """
        Record the forward pass for a batch of inputs

        With single=True the batch must hold one sample and the output node is
        the length-O vector (ready for output_jacobian).
        """
        inputs = self._check_inputs(inputs)
        if single and inputs.shape[0] != 1:
            raise ShapeError(f"single-sample graph needs a batch of 1, got {inputs.shape[0]}")
        graph = ComputeGraph(flat, self.layout)
        if self.spec.kind == "modadd_transformer":
            out = self._transformer(graph, inputs)
        elif self.spec.kind == "mlp":
            out = self._mlp(graph, inputs)
        else:
            out = self._dense(graph, graph.constant(inputs), "decoder")
        if single:
            out = graph.op("reshape", [out], shape=(self.n_outputs,))
        return graph, out

    def _dense(self, graph: ComputeGraph, x: Node, name: str) -> Node:
        h = graph.op("matmul", [x, graph.param(f"{name}.weight")])
        return graph.op("add", [h, graph.param(f"{name}.bias")])

    def _mlp(self, graph: ComputeGraph, inputs: np.ndarray) -> Node:
        h = graph.constant(inputs)
        for i in range(len(self.spec.hidden_dims)):
            h = graph.op("relu", [self._dense(graph, h, f"linear{i + 1}")])
        return graph.op("log_softmax", [self._dense(graph, h, "decoder")])

    def _transformer(self, graph: ComputeGraph, tokens: np.ndarray) -> Node:
        spec = self.spec
        batch, length = tokens.shape
        heads = (batch, length, spec.n_heads, spec.d_head)
        flat_heads = (batch, length, spec.d_model)

        h0 = graph.op("embedding_lookup", [graph.param("embedding.weight")], ids=tokens)
        q = graph.op("reshape", [graph.op("matmul", [h0, graph.param("attn.W_Q")])], shape=heads)
        k = graph.op("reshape", [graph.op("matmul", [h0, graph.param("attn.W_K")])], shape=heads)
        v = graph.op("reshape", [graph.op("matmul", [h0, graph.param("attn.W_V")])], shape=heads)
        attended = graph.op("reshape", [graph.op("scaled_dot_attention", [q, k, v])], shape=flat_heads)
        h1 = graph.op("add", [h0, graph.op("matmul", [attended, graph.param("attn.W_O")])])

        hidden = graph.op("relu", [self._dense(graph, h1, "linear1")])
        h2 = graph.op("add", [h1, self._dense(graph, hidden, "linear2")])

        last = graph.op("slice", [h2], axis=1, start=length - 1, stop=length)
        last = graph.op("reshape", [last], shape=(batch, spec.d_model))
        return graph.op("log_softmax", [self._dense(graph, last, "decoder")])

    # ------------------------------------------------------------------
    # evaluation helpers
    # ------------------------------------------------------------------

    def forward(self, flat: np.ndarray, inputs: np.ndarray) -> np.ndarray:
        """(B, O) outputs for a batch"""
        _, out = self.graph(flat, inputs)
        return out.value

    def jacobian(self, flat: np.ndarray, inputs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Output (O,) and Jacobian (O, D) for a single sample given as a batch of 1"""
        graph, out = self.graph(flat, inputs, single=True)
        return out.value, graph.output_jacobian(out)

    def loss_seeds(self, labels: np.ndarray, n_outputs: Optional[int] = None) -> np.ndarray:
        """dL/df for L = -f[y]: the constant vector -e_y per sample"""
        labels = np.asarray(labels)
        seeds = np.zeros((labels.size, n_outputs or self.n_outputs))
        seeds[np.arange(labels.size), labels] = -1.0
        return seeds

    def loss_gradient(self, flat: np.ndarray, inputs: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
        """Mean loss over the batch and its flat gradient"""
        graph, out = self.graph(flat, inputs)
        seeds = self.loss_seeds(labels) / len(labels)
        loss = float(np.sum(seeds * out.value))
        return loss, graph.backward(seeds, output=out)

    def sample_loss_gradients(self, flat: np.ndarray, inputs: np.ndarray, labels: np.ndarray) -> np.ndarray:
        """(B, D) per-sample gradients of -f[y], one graph per sample"""
        grads = np.zeros((len(labels), self.size))
        for row in range(len(labels)):
            graph, out = self.graph(flat, inputs[row:row + 1], single=True)
            grads[row] = graph.backward(self.loss_seeds(labels[row:row + 1])[0], output=out)
        return grads

    def predict_labels(self, flat: np.ndarray, inputs: np.ndarray) -> np.ndarray:
        """Argmax over the label space (the p result tokens for mod-add)"""
        outputs = self.forward(flat, inputs)
        return np.argmax(outputs[:, :self.spec.n_classes], axis=1)

    def accuracy(self, flat: np.ndarray, inputs: np.ndarray, labels: np.ndarray) -> float:
        if len(labels) == 0:
            return float('nan')
        return float(np.mean(self.predict_labels(flat, inputs) == np.asarray(labels)))


def build_model(spec: ModelSpec, seed: int) -> ParamVector:
    """Initialize parameters deterministically for a spec"""
    params = Model(spec).init_params(seed)
    logger.debug(f"Built {spec.kind} with {params.size} parameters in {len(params.registry)} components")
    return params


def forward_logprobs(spec: ModelSpec, params: ParamVector, tokens) -> np.ndarray:
    """Output vector of one sample (log-probabilities for the transformer and MLP)"""
    model = Model(spec)
    if params.size != model.size:
        raise ShapeError(f"parameter vector has {params.size} entries, spec needs {model.size}")
    inputs = np.asarray(tokens)[None, ...]
    _, out = model.graph(params.data, inputs, single=True)
    return out.value
