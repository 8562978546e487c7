from .graph import (
    ELEMENTWISE,
    ELEMENTWISE_BINARY,
    ELEMENTWISE_UNARY,
    LAYOUT,
    LINEAR,
    OPERATOR_KINDS,
    PRIMITIVE_KINDS,
    ComputationGraph,
    Graph,
    GraphBuilder,
    Node,
    PrimitiveGraph,
    Ref,
    Shape,
    TensorSpec,
    ancestors_of,
    category,
    fresh_id,
    numel,
    prune_dead,
    relabel,
    topo_sort,
)
from .partition import cut_edges, merge_parts, partition
from .serde import (
    canonical_hash,
    canonical_order,
    deserialize,
    dumps,
    graph_from_dict,
    graph_to_dict,
    load_graph,
    save_graph,
    serialize,
)
from .shapes import (
    OPAQUE_OPS,
    OpaqueOp,
    ValidationReport,
    infer_shapes,
    primitive_shape,
    ref_shape,
    register_opaque,
    shapes_of,
    validate,
)
