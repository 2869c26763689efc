# Per-experiment default configs and conditional builders
