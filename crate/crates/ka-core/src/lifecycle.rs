//! The private-key life-cycle state machine.
//!
//! Every physical instance of a private key owns exactly one machine. The
//! five states are the phases of the key's life; the transitions are the
//! tasks performed on it. `NonExisting` is both the initial and the final
//! state: an instance enters through one of the three constructors
//! (`Generate`, `CopyIn`, `RecoverIn`) and leaves, permanently, through
//! `Destruct`. Copying and recovering spawn a *new* instance with its own
//! machine; the source instance records a `CopySource`/`RecoverSource`
//! event without changing state.
//!
//! This module is pure: no cryptography, no persistence, no authorization.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::OnceLock;

use thiserror::Error;

use crate::types::{ActorId, InstanceId, KeyId, Timestamp};

/// Phase of an instance's life.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LifecycleState {
    /// Initial and final state; the key does not exist (yet, or anymore).
    NonExisting,
    /// Just generated, copied or recovered; raw material in memory.
    Storable,
    /// Escrowed for backup or similar; inactive until recovered.
    Deposited,
    /// Sealed in a token, waiting to reach its participant.
    Deliverable,
    /// Held by its participant and usable — the intended state.
    Usable,
}

impl LifecycleState {
    pub const ALL: [LifecycleState; 5] = [
        LifecycleState::NonExisting,
        LifecycleState::Storable,
        LifecycleState::Deposited,
        LifecycleState::Deliverable,
        LifecycleState::Usable,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LifecycleState::NonExisting => "non-existing",
            LifecycleState::Storable => "storable",
            LifecycleState::Deposited => "deposited",
            LifecycleState::Deliverable => "deliverable",
            LifecycleState::Usable => "usable",
        }
    }
}

impl fmt::Display for LifecycleState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A task performed on a key instance.
///
/// `CopySource` and `RecoverSource` are the source-side halves of `CopyIn`
/// and `RecoverIn`: they are recorded on the instance being copied from or
/// recovered from and never change its state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Transition {
    Generate,
    CopyIn,
    RecoverIn,
    Deposit,
    Store,
    Deliver,
    Use,
    Destruct,
    CopySource,
    RecoverSource,
}

impl Transition {
    pub const ALL: [Transition; 10] = [
        Transition::Generate,
        Transition::CopyIn,
        Transition::RecoverIn,
        Transition::Deposit,
        Transition::Store,
        Transition::Deliver,
        Transition::Use,
        Transition::Destruct,
        Transition::CopySource,
        Transition::RecoverSource,
    ];

    /// The three ways an instance can come into existence.
    pub fn is_constructor(self) -> bool {
        matches!(
            self,
            Transition::Generate | Transition::CopyIn | Transition::RecoverIn
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            Transition::Generate => "generate",
            Transition::CopyIn => "copy-in",
            Transition::RecoverIn => "recover-in",
            Transition::Deposit => "deposit",
            Transition::Store => "store",
            Transition::Deliver => "deliver",
            Transition::Use => "use",
            Transition::Destruct => "destruct",
            Transition::CopySource => "copy-source",
            Transition::RecoverSource => "recover-source",
        }
    }

    pub fn from_name(name: &str) -> Option<Transition> {
        Transition::ALL.into_iter().find(|t| t.name() == name)
    }
}

impl fmt::Display for Transition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LifecycleError {
    #[error("illegal transition {transition} from state {from}")]
    IllegalTransition {
        from: LifecycleState,
        transition: Transition,
    },
    #[error("instance is retired (history ends with destruct)")]
    InstanceRetired,
    #[error("source instance in state {0} cannot serve as a copy source")]
    SourceNotCopyable(LifecycleState),
    #[error("source instance in state {0} is not deposited")]
    SourceNotDeposited(LifecycleState),
    #[error("source instance is retired")]
    SourceRetired,
}

/// The fixed edge set. Destruct is legal from every real state, recovery
/// never consumes the deposited source, and `Use`/`CopySource`/
/// `RecoverSource` are self-loops.
const EDGES: [(LifecycleState, Transition, LifecycleState); 14] = [
    (LifecycleState::NonExisting, Transition::Generate, LifecycleState::Storable),
    (LifecycleState::NonExisting, Transition::CopyIn, LifecycleState::Storable),
    (LifecycleState::NonExisting, Transition::RecoverIn, LifecycleState::Storable),
    (LifecycleState::Storable, Transition::Deposit, LifecycleState::Deposited),
    (LifecycleState::Storable, Transition::Store, LifecycleState::Deliverable),
    (LifecycleState::Storable, Transition::Destruct, LifecycleState::NonExisting),
    (LifecycleState::Storable, Transition::CopySource, LifecycleState::Storable),
    (LifecycleState::Deposited, Transition::RecoverSource, LifecycleState::Deposited),
    (LifecycleState::Deposited, Transition::Destruct, LifecycleState::NonExisting),
    (LifecycleState::Deliverable, Transition::Deliver, LifecycleState::Usable),
    (LifecycleState::Deliverable, Transition::Destruct, LifecycleState::NonExisting),
    (LifecycleState::Usable, Transition::Use, LifecycleState::Usable),
    (LifecycleState::Usable, Transition::CopySource, LifecycleState::Usable),
    (LifecycleState::Usable, Transition::Destruct, LifecycleState::NonExisting),
];

/// The full transition table, state → set of (transition, successor).
pub fn transition_table(
) -> &'static BTreeMap<LifecycleState, BTreeSet<(Transition, LifecycleState)>> {
    static TABLE: OnceLock<BTreeMap<LifecycleState, BTreeSet<(Transition, LifecycleState)>>> =
        OnceLock::new();
    TABLE.get_or_init(|| {
        let mut table: BTreeMap<_, BTreeSet<_>> = LifecycleState::ALL
            .into_iter()
            .map(|s| (s, BTreeSet::new()))
            .collect();
        for (from, t, to) in EDGES {
            table.get_mut(&from).expect("all states present").insert((t, to));
        }
        table
    })
}

/// Successor state for one step, if the edge exists.
pub fn successor(from: LifecycleState, transition: Transition) -> Option<LifecycleState> {
    EDGES
        .iter()
        .find(|(f, t, _)| *f == from && *t == transition)
        .map(|(_, _, to)| *to)
}

/// How an instance came into existence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Origin {
    Generated,
    CopiedFrom(InstanceId),
    RecoveredFrom(InstanceId),
}

impl Origin {
    pub fn constructor(&self) -> Transition {
        match self {
            Origin::Generated => Transition::Generate,
            Origin::CopiedFrom(_) => Transition::CopyIn,
            Origin::RecoveredFrom(_) => Transition::RecoverIn,
        }
    }
}

/// One recorded step of an instance's history.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HistoryEntry {
    pub transition: Transition,
    pub at: Timestamp,
    pub actor: ActorId,
}

/// One physical instance of a private key together with its state machine.
///
/// The state is always the fold of `history` over the transition table;
/// `replay` re-derives it and is the arbiter when loading persisted
/// histories. A retired instance (history ends with `Destruct`) accepts no
/// further transitions but is kept for audit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyInstance {
    instance_id: InstanceId,
    key_id: KeyId,
    state: LifecycleState,
    history: Vec<HistoryEntry>,
    origin: Origin,
    retired: bool,
}

impl KeyInstance {
    /// Construct a fresh instance from newly generated key material.
    pub fn generate(
        instance_id: InstanceId,
        key_id: KeyId,
        actor: ActorId,
        now: Timestamp,
    ) -> KeyInstance {
        KeyInstance {
            instance_id,
            key_id,
            state: LifecycleState::Storable,
            history: vec![HistoryEntry {
                transition: Transition::Generate,
                at: now,
                actor,
            }],
            origin: Origin::Generated,
            retired: false,
        }
    }

    /// Construct a new instance by copying an existing one. The source
    /// records a `CopySource` event and keeps its state.
    pub fn copy_from(
        source: &mut KeyInstance,
        instance_id: InstanceId,
        actor: ActorId,
        now: Timestamp,
    ) -> Result<KeyInstance, LifecycleError> {
        if source.retired {
            return Err(LifecycleError::SourceRetired);
        }
        if successor(source.state, Transition::CopySource).is_none() {
            return Err(LifecycleError::SourceNotCopyable(source.state));
        }
        source.apply(Transition::CopySource, actor.clone(), now)?;
        Ok(KeyInstance {
            instance_id,
            key_id: source.key_id.clone(),
            state: LifecycleState::Storable,
            history: vec![HistoryEntry {
                transition: Transition::CopyIn,
                at: now,
                actor,
            }],
            origin: Origin::CopiedFrom(source.instance_id.clone()),
            retired: false,
        })
    }

    /// Construct a new instance from a deposited one. The deposited source
    /// stays deposited, so a backup survives any number of recoveries.
    pub fn recover_from(
        source: &mut KeyInstance,
        instance_id: InstanceId,
        actor: ActorId,
        now: Timestamp,
    ) -> Result<KeyInstance, LifecycleError> {
        if source.retired {
            return Err(LifecycleError::SourceRetired);
        }
        if source.state != LifecycleState::Deposited {
            return Err(LifecycleError::SourceNotDeposited(source.state));
        }
        source.apply(Transition::RecoverSource, actor.clone(), now)?;
        Ok(KeyInstance {
            instance_id,
            key_id: source.key_id.clone(),
            state: LifecycleState::Storable,
            history: vec![HistoryEntry {
                transition: Transition::RecoverIn,
                at: now,
                actor,
            }],
            origin: Origin::RecoveredFrom(source.instance_id.clone()),
            retired: false,
        })
    }

    /// Apply one transition, extending the history. `Destruct` retires the
    /// instance.
    pub fn apply(
        &mut self,
        transition: Transition,
        actor: ActorId,
        now: Timestamp,
    ) -> Result<(), LifecycleError> {
        if self.retired {
            return Err(LifecycleError::InstanceRetired);
        }
        let next = successor(self.state, transition).ok_or(LifecycleError::IllegalTransition {
            from: self.state,
            transition,
        })?;
        self.history.push(HistoryEntry {
            transition,
            at: now,
            actor,
        });
        self.state = next;
        if transition == Transition::Destruct {
            self.retired = true;
        }
        Ok(())
    }

    /// Rebuild an instance from a persisted event list, validating that the
    /// history is accepted by the transition table: the first entry must be
    /// the constructor matching `origin`, and at most one `Destruct` may
    /// appear, as the last entry.
    pub fn replay(
        instance_id: InstanceId,
        key_id: KeyId,
        origin: Origin,
        history: Vec<HistoryEntry>,
    ) -> Result<KeyInstance, LifecycleError> {
        let first = history.first().ok_or(LifecycleError::IllegalTransition {
            from: LifecycleState::NonExisting,
            transition: Transition::Destruct,
        })?;
        if first.transition != origin.constructor() {
            return Err(LifecycleError::IllegalTransition {
                from: LifecycleState::NonExisting,
                transition: first.transition,
            });
        }
        let mut instance = KeyInstance {
            instance_id,
            key_id,
            state: LifecycleState::NonExisting,
            history: Vec::with_capacity(history.len()),
            origin,
            retired: false,
        };
        for entry in history {
            instance.apply(entry.transition, entry.actor, entry.at)?;
        }
        Ok(instance)
    }

    pub fn instance_id(&self) -> &InstanceId {
        &self.instance_id
    }

    pub fn key_id(&self) -> &KeyId {
        &self.key_id
    }

    pub fn state(&self) -> LifecycleState {
        self.state
    }

    pub fn history(&self) -> &[HistoryEntry] {
        &self.history
    }

    pub fn origin(&self) -> &Origin {
        &self.origin
    }

    pub fn retired(&self) -> bool {
        self.retired
    }

    /// Number of recorded uses.
    pub fn use_count(&self) -> usize {
        self.history
            .iter()
            .filter(|e| e.transition == Transition::Use)
            .count()
    }

    /// Number of times this instance served as a recovery source.
    pub fn recover_source_count(&self) -> usize {
        self.history
            .iter()
            .filter(|e| e.transition == Transition::RecoverSource)
            .count()
    }
}

/// Which constructor `spawn` should run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpawnKind {
    Generate,
    CopyIn,
    RecoverIn,
}

/// Unified constructor entry point. `Generate` takes the new logical
/// `key_id` and no source; `CopyIn`/`RecoverIn` take a live source instance
/// and inherit its key id.
pub fn spawn(
    kind: SpawnKind,
    instance_id: InstanceId,
    key_id: Option<KeyId>,
    source: Option<&mut KeyInstance>,
    actor: ActorId,
    now: Timestamp,
) -> Result<KeyInstance, LifecycleError> {
    match (kind, key_id, source) {
        (SpawnKind::Generate, Some(key_id), None) => {
            Ok(KeyInstance::generate(instance_id, key_id, actor, now))
        }
        (SpawnKind::CopyIn, None, Some(source)) => {
            KeyInstance::copy_from(source, instance_id, actor, now)
        }
        (SpawnKind::RecoverIn, None, Some(source)) => {
            KeyInstance::recover_from(source, instance_id, actor, now)
        }
        _ => panic!("spawn: generate takes a key id and no source; copy/recover take a source"),
    }
}

/// Brute-force enumeration of every transition sequence of length
/// `1..=max_len` accepted from the initial state, walking the transition
/// table directly. After a `Destruct` the instance is retired and no
/// further transition is accepted. This is the oracle the step-wise
/// [`KeyInstance::apply`] path is checked against.
pub fn enumerate_legal_paths(max_len: usize) -> BTreeSet<Vec<Transition>> {
    assert!(max_len >= 1, "max_len must be at least 1");
    let mut accepted = BTreeSet::new();
    let mut frontier: Vec<(LifecycleState, bool, Vec<Transition>)> =
        vec![(LifecycleState::NonExisting, false, Vec::new())];
    for _ in 0..max_len {
        let mut next_frontier = Vec::new();
        for (state, retired, path) in frontier {
            if retired {
                continue;
            }
            for (transition, to) in &transition_table()[&state] {
                let mut extended = path.clone();
                extended.push(*transition);
                accepted.insert(extended.clone());
                next_frontier.push((*to, *transition == Transition::Destruct, extended));
            }
        }
        frontier = next_frontier;
    }
    accepted
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn actor() -> ActorId {
        ActorId::new("test")
    }

    fn t(secs: i64) -> Timestamp {
        Timestamp(secs)
    }

    fn fresh(state: LifecycleState) -> KeyInstance {
        let mut i = KeyInstance::generate(
            InstanceId::new("x-1"),
            KeyId::new("k-1"),
            actor(),
            t(0),
        );
        match state {
            LifecycleState::Storable => {}
            LifecycleState::Deposited => i.apply(Transition::Deposit, actor(), t(1)).unwrap(),
            LifecycleState::Deliverable => i.apply(Transition::Store, actor(), t(1)).unwrap(),
            LifecycleState::Usable => {
                i.apply(Transition::Store, actor(), t(1)).unwrap();
                i.apply(Transition::Deliver, actor(), t(2)).unwrap();
            }
            LifecycleState::NonExisting => i.apply(Transition::Destruct, actor(), t(1)).unwrap(),
        }
        i
    }

    #[test]
    fn table_matches_committed_edge_set() {
        use LifecycleState::*;
        use Transition::*;
        let table = transition_table();
        let expect = |state: LifecycleState, edges: &[(Transition, LifecycleState)]| {
            assert_eq!(
                table[&state],
                edges.iter().copied().collect::<BTreeSet<_>>(),
                "edges from {state}"
            );
        };
        expect(NonExisting, &[(Generate, Storable), (CopyIn, Storable), (RecoverIn, Storable)]);
        expect(
            Storable,
            &[
                (Deposit, Deposited),
                (Store, Deliverable),
                (Destruct, NonExisting),
                (CopySource, Storable),
            ],
        );
        expect(Deposited, &[(RecoverSource, Deposited), (Destruct, NonExisting)]);
        expect(Deliverable, &[(Deliver, Usable), (Destruct, NonExisting)]);
        expect(
            Usable,
            &[(Use, Usable), (CopySource, Usable), (Destruct, NonExisting)],
        );
        // No edge delivers straight out of deposit.
        assert!(!table[&Deposited].iter().any(|(tr, _)| *tr == Deliver));
        // Constructors only leave the initial state; Destruct is the only
        // way back in.
        for (state, edges) in table {
            for (transition, to) in edges {
                assert_eq!(transition.is_constructor(), *state == NonExisting);
                assert_eq!(*to == NonExisting, *transition == Destruct);
            }
        }
    }

    #[test]
    fn apply_follows_edges_and_grows_history() {
        let mut i = fresh(LifecycleState::Storable);
        i.apply(Transition::Store, actor(), t(5)).unwrap();
        assert_eq!(i.state(), LifecycleState::Deliverable);

        let mut u = fresh(LifecycleState::Usable);
        let before = u.history().len();
        u.apply(Transition::Use, actor(), t(9)).unwrap();
        assert_eq!(u.state(), LifecycleState::Usable);
        assert_eq!(u.history().len(), before + 1);
        assert_eq!(u.use_count(), 1);
    }

    #[test]
    fn apply_rejects_missing_edges_and_retired_instances() {
        let mut d = fresh(LifecycleState::Deposited);
        assert_eq!(
            d.apply(Transition::Deliver, actor(), t(3)),
            Err(LifecycleError::IllegalTransition {
                from: LifecycleState::Deposited,
                transition: Transition::Deliver,
            })
        );

        let mut gone = fresh(LifecycleState::NonExisting);
        assert!(gone.retired());
        assert_eq!(
            gone.apply(Transition::Generate, actor(), t(3)),
            Err(LifecycleError::InstanceRetired)
        );
    }

    #[test]
    fn generate_spawns_storable_with_single_entry_history() {
        let i = fresh(LifecycleState::Storable);
        assert_eq!(i.state(), LifecycleState::Storable);
        assert_eq!(i.history().len(), 1);
        assert_eq!(i.history()[0].transition, Transition::Generate);
        assert_eq!(*i.origin(), Origin::Generated);
    }

    #[test]
    fn recover_spawns_new_instance_and_preserves_source() {
        let mut source = fresh(LifecycleState::Deposited);
        let recovered =
            KeyInstance::recover_from(&mut source, InstanceId::new("x-2"), actor(), t(7)).unwrap();
        assert_eq!(recovered.state(), LifecycleState::Storable);
        assert_eq!(recovered.key_id(), source.key_id());
        assert_eq!(
            *recovered.origin(),
            Origin::RecoveredFrom(source.instance_id().clone())
        );
        assert_eq!(source.state(), LifecycleState::Deposited);
        assert_eq!(source.recover_source_count(), 1);
    }

    #[test]
    fn recover_requires_deposited_source() {
        let mut usable = fresh(LifecycleState::Usable);
        assert_eq!(
            KeyInstance::recover_from(&mut usable, InstanceId::new("x-2"), actor(), t(7)),
            Err(LifecycleError::SourceNotDeposited(LifecycleState::Usable))
        );
    }

    #[test]
    fn copy_requires_copyable_source() {
        let mut deposited = fresh(LifecycleState::Deposited);
        assert_eq!(
            KeyInstance::copy_from(&mut deposited, InstanceId::new("x-2"), actor(), t(7)),
            Err(LifecycleError::SourceNotCopyable(LifecycleState::Deposited))
        );
        let mut retired = fresh(LifecycleState::NonExisting);
        assert_eq!(
            KeyInstance::copy_from(&mut retired, InstanceId::new("x-2"), actor(), t(7)),
            Err(LifecycleError::SourceRetired)
        );
    }

    #[test]
    fn spawn_dispatches_to_the_right_constructor() {
        let generated = spawn(
            SpawnKind::Generate,
            InstanceId::new("x-g"),
            Some(KeyId::new("k-9")),
            None,
            actor(),
            t(0),
        )
        .unwrap();
        assert_eq!(generated.state(), LifecycleState::Storable);
        assert_eq!(*generated.origin(), Origin::Generated);

        let mut source = fresh(LifecycleState::Storable);
        let copied = spawn(
            SpawnKind::CopyIn,
            InstanceId::new("x-c"),
            None,
            Some(&mut source),
            actor(),
            t(1),
        )
        .unwrap();
        assert_eq!(copied.key_id(), source.key_id());

        let mut deposited = fresh(LifecycleState::Deposited);
        let recovered = spawn(
            SpawnKind::RecoverIn,
            InstanceId::new("x-r"),
            None,
            Some(&mut deposited),
            actor(),
            t(2),
        )
        .unwrap();
        assert_eq!(
            *recovered.origin(),
            Origin::RecoveredFrom(deposited.instance_id().clone())
        );
    }

    #[test]
    fn enumeration_of_length_one_is_the_constructor_set() {
        let paths = enumerate_legal_paths(1);
        let expected: BTreeSet<Vec<Transition>> = [
            vec![Transition::Generate],
            vec![Transition::CopyIn],
            vec![Transition::RecoverIn],
        ]
        .into_iter()
        .collect();
        assert_eq!(paths, expected);
    }

    #[test]
    fn enumeration_of_length_two_contains_expected_paths() {
        let paths = enumerate_legal_paths(2);
        assert!(paths.contains(&vec![Transition::Generate, Transition::Deposit]));
        assert!(paths.contains(&vec![Transition::Generate, Transition::Destruct]));
    }

    #[test]
    fn no_enumerated_path_continues_after_destruct() {
        for path in enumerate_legal_paths(6) {
            if let Some(pos) = path.iter().position(|t| *t == Transition::Destruct) {
                assert_eq!(pos, path.len() - 1, "destruct not final in {path:?}");
            }
        }
    }

    #[test]
    fn constructor_exclusivity_over_enumeration() {
        for path in enumerate_legal_paths(6) {
            assert!(path[0].is_constructor());
            assert_eq!(
                path.iter().filter(|t| t.is_constructor()).count(),
                1,
                "second constructor in {path:?}"
            );
        }
    }

    /// Step-wise `apply` accepts exactly the enumerated paths: walking all
    /// 10^k transition sequences with pruning must reproduce the oracle's
    /// path set and reachable-state set.
    #[test]
    fn apply_agrees_with_enumeration_oracle() {
        let max_len = 6;
        let oracle = enumerate_legal_paths(max_len);

        let mut accepted: BTreeSet<Vec<Transition>> = BTreeSet::new();
        let mut stack: Vec<Vec<Transition>> = vec![Vec::new()];
        while let Some(prefix) = stack.pop() {
            if prefix.len() == max_len {
                continue;
            }
            for transition in Transition::ALL {
                let mut candidate = prefix.clone();
                candidate.push(transition);
                if replay_path(&candidate).is_some() {
                    accepted.insert(candidate.clone());
                    stack.push(candidate);
                }
            }
        }
        assert_eq!(accepted, oracle);

        let oracle_states: BTreeSet<LifecycleState> = oracle
            .iter()
            .map(|p| replay_path(p).expect("oracle path accepted by apply"))
            .collect();
        let applied_states: BTreeSet<LifecycleState> = accepted
            .iter()
            .map(|p| replay_path(p).expect("accepted"))
            .collect();
        assert_eq!(applied_states, oracle_states);
    }

    /// Drive a transition sequence through `apply`, returning the final
    /// state if every step is accepted.
    fn replay_path(path: &[Transition]) -> Option<LifecycleState> {
        let (first, rest) = path.split_first()?;
        let mut instance = match first {
            Transition::Generate => {
                KeyInstance::generate(InstanceId::new("x"), KeyId::new("k"), actor(), t(0))
            }
            Transition::CopyIn => {
                let mut src = fresh(LifecycleState::Storable);
                KeyInstance::copy_from(&mut src, InstanceId::new("x"), actor(), t(0)).ok()?
            }
            Transition::RecoverIn => {
                let mut src = fresh(LifecycleState::Deposited);
                KeyInstance::recover_from(&mut src, InstanceId::new("x"), actor(), t(0)).ok()?
            }
            _ => return None,
        };
        for (i, transition) in rest.iter().enumerate() {
            instance.apply(*transition, actor(), t(i as i64 + 1)).ok()?;
        }
        Some(instance.state())
    }

    fn arb_accepted_path() -> impl Strategy<Value = Vec<Transition>> {
        (1usize..=6).prop_flat_map(|len| {
            let paths: Vec<Vec<Transition>> = enumerate_legal_paths(len).into_iter().collect();
            proptest::sample::select(paths)
        })
    }

    proptest! {
        /// Replay soundness: replaying a valid history reproduces the
        /// stepped instance exactly; histories with one transition swapped
        /// for an illegal one are rejected.
        #[test]
        fn replay_reproduces_and_rejects(path in arb_accepted_path(), corrupt_at in 0usize..6) {
            let stepped = {
                let mut inst: Option<KeyInstance> = None;
                for (i, tr) in path.iter().enumerate() {
                    match (&mut inst, tr) {
                        (None, Transition::Generate) => {
                            inst = Some(KeyInstance::generate(
                                InstanceId::new("x"), KeyId::new("k"), actor(), t(i as i64)));
                        }
                        (None, Transition::CopyIn) => {
                            let mut src = fresh(LifecycleState::Storable);
                            inst = Some(KeyInstance::copy_from(
                                &mut src, InstanceId::new("x"), actor(), t(i as i64)).unwrap());
                        }
                        (None, Transition::RecoverIn) => {
                            let mut src = fresh(LifecycleState::Deposited);
                            inst = Some(KeyInstance::recover_from(
                                &mut src, InstanceId::new("x"), actor(), t(i as i64)).unwrap());
                        }
                        (Some(inst), tr) => inst.apply(*tr, actor(), t(i as i64)).unwrap(),
                        _ => unreachable!("accepted path starts with a constructor"),
                    }
                }
                inst.unwrap()
            };

            let replayed = KeyInstance::replay(
                stepped.instance_id().clone(),
                stepped.key_id().clone(),
                stepped.origin().clone(),
                stepped.history().to_vec(),
            ).expect("valid history accepted");
            prop_assert_eq!(&replayed, &stepped);

            // Swap one entry for a transition that is illegal at that point.
            let idx = corrupt_at % stepped.history().len();
            let mut history = stepped.history().to_vec();
            let state_before = {
                let mut s = LifecycleState::NonExisting;
                for e in &history[..idx] {
                    s = successor(s, e.transition).unwrap();
                }
                s
            };
            let bad = Transition::ALL
                .into_iter()
                .find(|tr| successor(state_before, *tr).is_none())
                .expect("every state refuses some transition");
            history[idx].transition = bad;
            let origin = match history[0].transition {
                Transition::Generate => Origin::Generated,
                Transition::CopyIn => Origin::CopiedFrom(InstanceId::new("src")),
                Transition::RecoverIn => Origin::RecoveredFrom(InstanceId::new("src")),
                _ => stepped.origin().clone(),
            };
            prop_assert!(KeyInstance::replay(
                InstanceId::new("x"),
                KeyId::new("k"),
                origin,
                history,
            ).is_err());
        }

        /// Source conservation: recovering n times leaves the source
        /// deposited and records exactly n recover-source events.
        #[test]
        fn recover_source_count_matches_spawned_instances(n in 0usize..12) {
            let mut source = fresh(LifecycleState::Deposited);
            let mut recovered = Vec::new();
            for i in 0..n {
                recovered.push(KeyInstance::recover_from(
                    &mut source,
                    InstanceId::new(format!("x-{i}")),
                    actor(),
                    t(i as i64 + 10),
                ).unwrap());
            }
            prop_assert_eq!(source.state(), LifecycleState::Deposited);
            prop_assert_eq!(source.recover_source_count(), n);
            let from_this_source = recovered.iter().filter(|r| {
                *r.origin() == Origin::RecoveredFrom(source.instance_id().clone())
            }).count();
            prop_assert_eq!(from_this_source, n);
        }
    }
}
