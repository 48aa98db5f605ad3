"""Detection, classification and auditing of upgradeable smart contracts
from EVM runtime bytecode and transaction history."""

__version__ = "0.1.0"

from .bytecode import (  # noqa: E402
    BytecodeFeatures,
    Instruction,
    InstructionStream,
    analyze_bytecode,
    detect_fallback,
    disassemble,
    extract_features,
    extract_local_selectors,
    extract_outbound_selectors,
)
from .chains import (  # noqa: E402
    Category,
    SecurityFinding,
    Severity,
    UpgradeChain,
    UpgradeEvent,
    audit_access_control,
    audit_logic_targets,
    audit_uninitialized_logic,
    audit_version,
    build_metamorphic_chain,
    build_upgrade_chain,
)
from .classifier import (  # noqa: E402
    ContractAnalysis,
    Pattern,
    PatternClassification,
    analyze_contract,
    classify,
    detect_hierarchy_upgrader,
    resolve_strategy_vs_data,
)
from .estimators import BytecodeFeaturizer, UpgradePatternDetector  # noqa: E402
from .signatures import (  # noqa: E402
    FunctionSignature,
    UpgradeFunctionDb,
    compile_db,
    decode_upgrade_call,
    keccak_selector,
    match_upgrade_selectors,
)
