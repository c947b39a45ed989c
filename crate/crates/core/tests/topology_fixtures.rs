use roofline_core::topology::{
    fixture_path, BoundBuffer, MachineTopology, Scenario, ScenarioKind,
};

#[test]
fn two_socket_server_fixture() {
    let topo = MachineTopology::discover_from(&fixture_path("xeon6248-2s")).unwrap();
    assert_eq!(topo.logical_cpus(), 40);
    assert_eq!(topo.sockets(), 2);
    assert_eq!(topo.llc_bytes, 28160 * 1024);
    assert!(topo.warnings.is_empty());
    assert_eq!(topo.cpus_of_socket(0), (0..20).collect::<Vec<_>>());
    assert_eq!(topo.cpus_of_socket(1), (20..40).collect::<Vec<_>>());
    assert_eq!(topo.node_of_cpu(0), Some(0));
    assert_eq!(topo.node_of_cpu(39), Some(1));

    let st = Scenario::single_thread(&topo).unwrap();
    assert_eq!(st.cpu_set, vec![0]);
    assert_eq!(st.mem_nodes, vec![0]);

    let ss = Scenario::single_socket(&topo).unwrap();
    assert_eq!(ss.cpu_set.len(), 20);
    assert_eq!(ss.mem_nodes, vec![0]);

    let ts = Scenario::two_sockets(&topo).unwrap();
    assert_eq!(ts.cpu_set.len(), 40);
    assert_eq!(ts.mem_nodes, vec![0, 1]);
    for kind in ScenarioKind::ALL {
        Scenario::for_kind(kind, &topo).unwrap().validate(&topo).unwrap();
    }
}

#[test]
fn four_core_desktop_fixture() {
    let topo = MachineTopology::discover_from(&fixture_path("1s-4c")).unwrap();
    assert_eq!(topo.logical_cpus(), 4);
    assert_eq!(topo.sockets(), 1);
    assert_eq!(topo.llc_bytes, 8192 * 1024);

    let ss = Scenario::single_socket(&topo).unwrap();
    assert_eq!(ss.cpu_set, vec![0, 1, 2, 3]);

    // A one-socket machine cannot host the two-socket scenario.
    let err = Scenario::two_sockets(&topo).unwrap_err();
    assert!(err.to_string().contains("needs 2 sockets"), "{err}");
}

#[test]
fn degenerate_single_cpu_fixture_uses_fallbacks() {
    let topo = MachineTopology::discover_from(&fixture_path("1cpu")).unwrap();
    assert_eq!(topo.logical_cpus(), 1);
    assert_eq!(topo.llc_bytes, roofline_core::topology::LLC_FALLBACK_BYTES);
    // Missing node and cache directories each leave a warning.
    assert_eq!(topo.warnings.len(), 2);
    assert_eq!(topo.node_of_cpu(0), Some(0));
    Scenario::single_thread(&topo).unwrap();
}

#[test]
fn missing_tree_is_a_clear_error() {
    let err = MachineTopology::discover_from(&fixture_path("no-such-machine")).unwrap_err();
    assert!(err.to_string().contains("online"), "{err}");
}

// Live-system checks. These exercise the real syscalls; they assume only
// that cpu 0 exists and that some memory node holds it.
#[cfg(target_os = "linux")]
mod live {
    use super::*;
    use roofline_core::topology::{current_affinity, pin_current_thread};

    #[test]
    fn discover_live_system() {
        let topo = MachineTopology::discover().unwrap();
        assert!(topo.logical_cpus() >= 1);
        assert!(topo.llc_bytes > 0);
        Scenario::single_thread(&topo).unwrap().validate(&topo).unwrap();
    }

    #[test]
    fn pin_and_read_back() {
        let handle = std::thread::spawn(|| {
            let readback = pin_current_thread(0).unwrap();
            assert_eq!(readback, vec![0]);
            assert_eq!(current_affinity().unwrap(), vec![0]);
        });
        handle.join().unwrap();
    }

    #[test]
    fn bind_to_first_node() {
        let topo = MachineTopology::discover().unwrap();
        let node = topo.node_ids()[0];
        match BoundBuffer::bind(node, 1 << 20) {
            Ok(mut buf) => {
                assert_eq!(buf.node(), node);
                assert!(buf.verified_fraction().unwrap() >= 0.95);
                buf.as_mut_slice().fill(0xAB);
                assert_eq!(buf.as_slice()[12345], 0xAB);
            }
            // Kernels without CONFIG_NUMA reject mbind; that is a host
            // limitation, not a binding bug.
            Err(e) => {
                let msg = e.to_string();
                assert!(msg.contains("mbind") || msg.contains("move_pages"), "{msg}");
            }
        }
    }

    #[test]
    fn bind_to_absent_node_fails() {
        assert!(BoundBuffer::bind(63, 4096).is_err());
    }
}
