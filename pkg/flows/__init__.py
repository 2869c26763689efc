# Training and orchestration. Import submodules directly:
#   from flows.sivi import build_posterior
#   from flows.pipeline import run
