import argparse
import os
from dataclasses import replace

from colorama import Fore, Style, init as colorama_init

from src.config import global_config
from src.pipeline.cost_model import CostModel
from src.service.errors import LlmsError
from src.service.logger import configure_logging, logger
from src.trace.simulator import (POLICIES, SimulationModel, get_policy, max_active_contexts, replay,
                                 replay_live, sweep_calling_rate, sweep_chunk_size)
from src.trace.trace_gen import PATTERNS, TraceConfig, describe, generate, read_trace, write_trace


def _ints(text):
    return [int(part) for part in text.split(",") if part.strip()]


def _floats(text):
    return [float(part) for part in text.split(",") if part.strip()]


def _mib(value):
    return int(float(value) * 1024 * 1024)


def print_summary(title, values: dict):
    print(Fore.RED + title + Style.RESET_ALL)
    for key, value in values.items():
        if isinstance(value, float):
            value = f"{value:.4f}"
        print(Fore.YELLOW + f"  {key:<18}" + Fore.GREEN + str(value))
    print(Style.RESET_ALL, end="")


def print_table(title, frame):
    print(Fore.RED + title + Style.RESET_ALL)
    print(Fore.GREEN + frame.to_string(index=False, float_format=lambda x: f"{x:.4f}") + Style.RESET_ALL)


def load_cost(path, chunk_tokens, io_per_op=True):
    cost = CostModel.load(path) if path else CostModel.calibrated(chunk_tokens)
    return replace(cost, io_per_op=io_per_op)


def add_trace_config_arguments(parser):
    parser.add_argument('--pattern', choices=PATTERNS, default='random', help='Context switching pattern')
    parser.add_argument('--rate', type=float, default=1 / 300, help='Calling rate in events per second')
    parser.add_argument('--hours', type=float, default=1.0, help='Trace duration in hours')
    parser.add_argument('--contexts', type=int, default=8, help='Number of active contexts')
    parser.add_argument('--markov-boost', type=float, default=0.5, help='Probability of staying in the last context')
    parser.add_argument('--seed', type=int, default=0, help='Random seed')


def trace_config_from(args):
    return TraceConfig(pattern=args.pattern, rate=args.rate, hours=args.hours, contexts=args.contexts,
                       markov_boost=args.markov_boost, seed=args.seed)


def add_simulation_arguments(parser, access='full'):
    parser.add_argument('--policy', default='llms', help=f'One of {", ".join(POLICIES)}')
    parser.add_argument('--mem-budget-mb', type=float, default=1536, help='Memory budget in MiB')
    parser.add_argument('--chunk-tokens', type=int, default=global_config.CHUNK_TOKENS, help='Tokens per chunk')
    parser.add_argument('--ratio-global', type=float, default=global_config.RATIO_GLOBAL,
                        help='Global average compression ratio')
    parser.add_argument('--window-tokens', type=int, default=2048, help='Sliding window of the simulated model')
    parser.add_argument('--cost', type=str, help='Profiled cost model (JSON); "live" replays through the service')
    parser.add_argument('--access', choices=('full', 'sparse'), default=access, help='Chunks a call needs')
    parser.add_argument('--io-per-load', action='store_true',
                        help='Charge the fixed I/O cost once per load instead of once per chunk file')


def simulation_model_from(args):
    return SimulationModel(chunk_tokens=args.chunk_tokens, ratio_global=args.ratio_global,
                           window_tokens=args.window_tokens, ratios=global_config.RATIOS)


def get_arguments():
    parser = argparse.ArgumentParser(description='LLMS: chunk-wise context memory for a system LLM service.')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('trace-gen', help='Synthesize a context switching trace')
    add_trace_config_arguments(p)
    p.add_argument('--out', type=str, required=True, help='Output JSONL file')

    p = sub.add_parser('simulate', help='Replay a trace against a policy')
    p.add_argument('--trace', type=str, required=True, help='Trace JSONL file')
    add_simulation_arguments(p)
    p.add_argument('--out', type=str, help='Per-event metrics CSV')

    p = sub.add_parser('profile', help='Profile recompute and I/O delays on this machine')
    p.add_argument('--out', type=str, required=True, help='Output JSON file')
    p.add_argument('--repeats', type=int, default=3, help='Samples per test point')
    p.add_argument('--synthetic', action='store_true', help='Use the calibrated synthetic timer instead of tinylm')

    p = sub.add_parser('serve', help='Run the socket service')
    p.add_argument('--socket', type=str, default=global_config.SOCKET_PATH, help='Unix socket path')
    p.add_argument('--mem-budget-mb', type=float, default=global_config.MEM_BUDGET_MB, help='Memory budget in MiB')
    p.add_argument('--max-contexts', type=int, default=global_config.MAX_CONTEXTS, help='Contexts per client')
    p.add_argument('--cost', type=str, help='Profiled cost model (JSON)')
    p.add_argument('--restore', type=str, help='Re-register the stored contexts of this client id')

    p = sub.add_parser('sweep-chunk-size', help='Mean switching latency per chunk size')
    p.add_argument('--trace', type=str, required=True, help='Trace JSONL file')
    p.add_argument('--sizes', type=_ints, default=[1, 2, 4, 8, 16, 32, 64, 128], help='Comma separated sizes')
    add_simulation_arguments(p, access='sparse')
    p.add_argument('--out', type=str, help='CSV output')

    p = sub.add_parser('max-contexts', help='Largest number of active contexts within a latency constraint')
    add_trace_config_arguments(p)
    add_simulation_arguments(p)
    p.add_argument('--latency', type=float, required=True, help='Mean switching latency constraint in seconds')
    p.add_argument('--max', type=int, default=16, help='Largest context count to try')
    p.add_argument('--out', type=str, help='CSV output')

    p = sub.add_parser('sweep-rate', help='Mean switching latency per calling rate')
    add_trace_config_arguments(p)
    add_simulation_arguments(p)
    p.add_argument('--rates', type=_floats, required=True, help='Comma separated calling rates')
    p.add_argument('--out', type=str, help='CSV output')

    p = sub.add_parser('client', help='Scripted new / call x N / del session against a running service')
    p.add_argument('--socket', type=str, default=global_config.SOCKET_PATH, help='Unix socket path')
    p.add_argument('--client-id', type=str, default='local', help='Client identity sent at bind')
    p.add_argument('--system-prompt', type=str, help='System prompt of the new context')
    p.add_argument('--prompt', type=str, action='append', help='Prompt; repeat for several calls')

    return parser.parse_args()


def command_trace_gen(args):
    config = trace_config_from(args)
    events = generate(config, progress=True)
    write_trace(events, args.out)
    print_summary(f"trace written to {args.out}", describe(events, config.contexts))


def command_simulate(args):
    trace = read_trace(args.trace)
    spec = get_policy(args.policy)
    if args.cost == 'live':
        base = global_config.store_config(budget_bytes=_mib(args.mem_budget_mb), chunk_tokens=args.chunk_tokens,
                                          ratio_global=args.ratio_global)
        contexts = len({e.ctx_id for e in trace})
        metrics = replay_live(trace, spec, lambda policy: _live_service(policy, base, contexts),
                              max_new_tokens=global_config.MAX_NEW_TOKENS, progress=True)
    else:
        model = simulation_model_from(args)
        cost = load_cost(args.cost, model.chunk_tokens, not args.io_per_load)
        metrics = replay(trace, spec, _mib(args.mem_budget_mb), cost, model,
                         access=args.access, progress=True)
    if args.out:
        metrics.to_csv(args.out)
    print_summary(f"policy {spec.name}", metrics.summary())


def _live_service(policy, base, max_contexts):
    from src.service.llm_service import LlmService

    return LlmService(global_config.model_config(), policy.store_config(base), max_contexts=max_contexts,
                      max_new_tokens=global_config.MAX_NEW_TOKENS)


def command_profile(args):
    from src.pipeline.profiler import SyntheticTimer, TinyLmProfileEngine, profile

    if args.synthetic:
        calibrated = CostModel.calibrated(global_config.CHUNK_TOKENS)
        engine = SyntheticTimer(calibrated.a_re, calibrated.b_re, calibrated.a_io, calibrated.b_io,
                                chunk_tokens=global_config.CHUNK_TOKENS)
    else:
        os.makedirs(global_config.SWAP_DIR, exist_ok=True)
        engine = TinyLmProfileEngine(global_config.model_config(), global_config.CHUNK_TOKENS,
                                     scratch_dir=global_config.SWAP_DIR)
    cost = profile(engine, repeats=args.repeats)
    cost.save(args.out)
    print_summary(f"cost model written to {args.out}", {
        "a_re": cost.a_re, "b_re": cost.b_re, "r2_re": cost.r2_re,
        "a_io": cost.a_io, "b_io": cost.b_io, "r2_io": cost.r2_io,
    })


def command_serve(args):
    from src.service.llm_service import LlmService
    from src.service.socket_server import LlmSocketServer

    store_config = global_config.store_config(budget_bytes=_mib(args.mem_budget_mb))
    cost = CostModel.load(args.cost) if args.cost else None
    service = LlmService(global_config.model_config(), store_config, cost_model=cost,
                         max_contexts=args.max_contexts, max_new_tokens=global_config.MAX_NEW_TOKENS)
    if args.restore:
        restored = service.restore_contexts(args.restore)
        print(Fore.YELLOW + f"restored contexts {restored} for {args.restore}" + Style.RESET_ALL)
    print(Fore.GREEN + f"LLMS service listening on {args.socket}" + Style.RESET_ALL)
    LlmSocketServer(service, args.socket).serve_forever()


def command_sweep_chunk_size(args):
    trace = read_trace(args.trace)
    model = simulation_model_from(args)
    cost = load_cost(args.cost, 16, not args.io_per_load)
    table = sweep_chunk_size(trace, args.sizes, _mib(args.mem_budget_mb), args.policy, cost, model,
                             access=args.access, progress=True)
    if args.out:
        table.to_csv(args.out, index=False, float_format="%.6f")
    print_table("chunk size sweep", table)


def command_max_contexts(args):
    model = simulation_model_from(args)
    cost = load_cost(args.cost, model.chunk_tokens, not args.io_per_load)
    best, table = max_active_contexts(trace_config_from(args), args.policy, _mib(args.mem_budget_mb),
                                      args.latency, cost, model,
                                      max_contexts=args.max, progress=True)
    if args.out:
        table.to_csv(args.out, index=False, float_format="%.6f")
    print_table("active contexts", table)
    print(Fore.RED + f"maximal active contexts within {args.latency}s: " + Fore.GREEN + str(best) + Style.RESET_ALL)


def command_sweep_rate(args):
    model = simulation_model_from(args)
    cost = load_cost(args.cost, model.chunk_tokens, not args.io_per_load)
    table = sweep_calling_rate(trace_config_from(args), args.rates, args.policy, _mib(args.mem_budget_mb),
                               cost, model, progress=True)
    if args.out:
        table.to_csv(args.out, index=False, float_format="%.6f")
    print_table("calling rate sweep", table)


def command_client(args):
    from src.service.socket_client import LlmClient

    prompts = args.prompt or ["Hello, context memory."]
    with LlmClient(args.socket, args.client_id) as client:
        ctx_id = client.new_llm_ctx(args.system_prompt)
        print(Fore.YELLOW + f"context {ctx_id}" + Style.RESET_ALL)
        for prompt in prompts:
            reply = client.call_llm(ctx_id, prompt)
            print(Fore.BLUE + f"{prompt!r} -> " + Fore.GREEN + repr(reply.get("tokens", "")) +
                  Fore.RED + f"  switch {reply.get('switch_latency_ms', 0.0):.2f} ms" + Style.RESET_ALL)
        client.del_llm_ctx(ctx_id)


COMMANDS = {
    'trace-gen': command_trace_gen,
    'simulate': command_simulate,
    'profile': command_profile,
    'serve': command_serve,
    'sweep-chunk-size': command_sweep_chunk_size,
    'max-contexts': command_max_contexts,
    'sweep-rate': command_sweep_rate,
    'client': command_client,
}


def main():
    colorama_init()
    configure_logging(global_config.LOG_LEVEL)
    args = get_arguments()
    try:
        COMMANDS[args.command](args)
    except LlmsError as e:
        logger.error("%s failed: %s", args.command, e)
        raise SystemExit(1)


if __name__ == "__main__":
    main()
