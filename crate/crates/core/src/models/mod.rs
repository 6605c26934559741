//! Programming models built on the application model: bags of tasks,
//! remote threads and MapReduce.

mod kv;
mod mapreduce;
mod partition;
mod task;
mod thread;

pub use kv::{decode_pairs, encode_pairs, write_pair, KeyValuePair, KvFormatError};
pub use mapreduce::{
    multiset, output_name, parse_output, read_input, run_mapreduce, run_sequential, InputFormat, MapParams,
    MapReduceConfig, MapReduceError, MapReduceOutcome, MapResult, Mapper, ReduceParams, ReduceResult, Reducer,
    OP_MAP, OP_REDUCE,
};
pub use partition::{fnv1a64, partition};
pub use task::{
    fib, run_tasks, submit_and_forget, RunProcess, TaskUnit, TwoPaths, OP_COPY_FILE, OP_DELETE_FILE, OP_FAIL,
    OP_FIB, OP_RENAME_FILE, OP_RUN_PROCESS, OP_SEQUENCE, OP_SLEEP,
};
pub use thread::{RemoteThread, ThreadError, ThreadState};

use crate::execution::OperationRegistry;

/// Every operation the models need on executors.
pub fn register_builtins(registry: &mut OperationRegistry) {
    task::register(registry);
    mapreduce::register(registry);
}
