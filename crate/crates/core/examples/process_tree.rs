//! Builds a process tree by hand from lifecycle events.
//!
//!     cargo run --example process_tree

use forkaware::{ExecEvent, Pid, ProcessTree, SignalKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = Pid(100);
    let mut tree = ProcessTree::new(root, 0);
    let events = [
        ExecEvent::ForkObserved {
            parent: root,
            child: Pid(101),
            at: 2,
        },
        ExecEvent::ForkObserved {
            parent: Pid(101),
            child: Pid(102),
            at: 3,
        },
        ExecEvent::ForkObserved {
            parent: root,
            child: Pid(103),
            at: 4,
        },
        ExecEvent::FatalSignal {
            pid: Pid(102),
            sig: SignalKind::Segv,
            at: 7,
        },
        ExecEvent::Exited {
            pid: root,
            code: 0,
            at: 9,
        },
    ];
    for ev in &events {
        tree.apply(ev)?;
    }

    // terminal states are final
    let late = ExecEvent::Exited {
        pid: Pid(102),
        code: 0,
        at: 10,
    };
    println!(
        "late exit of 102 rejected: {}",
        tree.apply(&late).unwrap_err()
    );

    println!("path to 102: {:?}", tree.tree_path(Pid(102))?);
    println!("live under root: {:?}", tree.live_descendants(root)?);

    tree.mark_killed(Pid(101), 12)?;
    tree.mark_killed(Pid(103), 12)?;
    println!("after teardown: {:?}", tree.live());
    println!("{}", serde_json::to_string_pretty(&tree)?);
    Ok(())
}
