//! Conference control plane: sessions, allowed lists, public-key
//! distribution and stream subscriptions.
//!
//! Keys are opaque tokens. The server only tracks who holds which key and
//! who subscribes to whom.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::resources::NodeId;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConferenceError {
    #[error("malformed token `{0}`")]
    MalformedToken(String),
    #[error("bad credentials for `{0}`")]
    BadCredentials(UserName),
    #[error("`{0}` is already logged in")]
    AlreadyLoggedIn(UserName),
    #[error("node {0} already carries a session")]
    NodeInUse(NodeId),
    #[error("node {0} is not logged in")]
    NotAuthenticated(NodeId),
    #[error("no conference named `{0}`")]
    UnknownConference(String),
    #[error("conference `{0}` already exists")]
    DuplicateConference(String),
    #[error("`{user}` is not allowed in `{conference}` as {role}")]
    NotAllowed { user: UserName, conference: String, role: Role },
    #[error("node {0} is already in `{1}`")]
    AlreadyInConference(NodeId, String),
    #[error("node {0} is not in `{1}`")]
    NotInConference(NodeId, String),
    #[error("spectator {0} cannot publish")]
    SpectatorCannotPublish(NodeId),
    #[error("no pending call from {caller} to {callee}")]
    NoPendingCall { caller: NodeId, callee: NodeId },
    #[error("node {0} cannot call itself")]
    SelfCall(NodeId),
}

fn check_token(s: &str) -> Result<(), ConferenceError> {
    if s.is_empty() || s.len() > 64 || !s.chars().all(|c| c.is_ascii_graphic()) {
        return Err(ConferenceError::MalformedToken(s.to_string()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct UserName(String);

impl UserName {
    pub fn new(name: impl Into<String>) -> Result<Self, ConferenceError> {
        let name = name.into();
        check_token(&name)?;
        Ok(UserName(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for UserName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for UserName {
    type Error = ConferenceError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        UserName::new(s)
    }
}

impl From<UserName> for String {
    fn from(u: UserName) -> String {
        u.0
    }
}

/// Opaque public-key token.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct KeyToken(String);

impl KeyToken {
    pub fn new(token: impl Into<String>) -> Result<Self, ConferenceError> {
        let token = token.into();
        check_token(&token)?;
        Ok(KeyToken(token))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for KeyToken {
    type Error = ConferenceError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        KeyToken::new(s)
    }
}

impl From<KeyToken> for String {
    fn from(k: KeyToken) -> String {
        k.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Participant,
    Spectator,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Participant => "participant",
            Role::Spectator => "spectator",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ControlKind {
    LogIn,
    Call,
    JoinConferenceP,
    JoinConferenceS,
    LeaveConference,
    EndCall,
    CallAccepted,
    Bye,
}

impl fmt::Display for ControlKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ControlKind::LogIn => "LOG_IN",
            ControlKind::Call => "CALL",
            ControlKind::JoinConferenceP => "JOIN_CONFERENCE_P",
            ControlKind::JoinConferenceS => "JOIN_CONFERENCE_S",
            ControlKind::LeaveConference => "LEAVE_CONFERENCE",
            ControlKind::EndCall => "END_CALL",
            ControlKind::CallAccepted => "CALL_ACCEPTED",
            ControlKind::Bye => "BYE",
        })
    }
}

/// Peer-to-server request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ControlMessage {
    LogIn { user: UserName, password: String },
    Call { callee: NodeId, key: KeyToken },
    JoinConferenceP { conference: String, key: KeyToken },
    JoinConferenceS { conference: String },
    LeaveConference { conference: String },
    EndCall { conference: String },
    CallAccepted { caller: NodeId, key: KeyToken },
    Bye,
}

impl ControlMessage {
    pub fn kind(&self) -> ControlKind {
        match self {
            ControlMessage::LogIn { .. } => ControlKind::LogIn,
            ControlMessage::Call { .. } => ControlKind::Call,
            ControlMessage::JoinConferenceP { .. } => ControlKind::JoinConferenceP,
            ControlMessage::JoinConferenceS { .. } => ControlKind::JoinConferenceS,
            ControlMessage::LeaveConference { .. } => ControlKind::LeaveConference,
            ControlMessage::EndCall { .. } => ControlKind::EndCall,
            ControlMessage::CallAccepted { .. } => ControlKind::CallAccepted,
            ControlMessage::Bye => ControlKind::Bye,
        }
    }

    /// Short payload description; never includes the password.
    pub fn summary(&self) -> String {
        match self {
            ControlMessage::LogIn { user, .. } => format!("user={user}"),
            ControlMessage::Call { callee, .. } => format!("callee={callee}"),
            ControlMessage::JoinConferenceP { conference, key } => format!("conference={conference} key={}", key.0),
            ControlMessage::JoinConferenceS { conference }
            | ControlMessage::LeaveConference { conference }
            | ControlMessage::EndCall { conference } => format!("conference={conference}"),
            ControlMessage::CallAccepted { caller, .. } => format!("caller={caller}"),
            ControlMessage::Bye => "-".into(),
        }
    }
}

/// Server-to-peer effect of a request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Notice {
    ConferenceList { to: NodeId, conferences: Vec<String> },
    PublicKey { to: NodeId, conference: String, publisher: NodeId, key: KeyToken },
    ParticipantLeft { to: NodeId, conference: String, participant: NodeId },
    CallInvite { to: NodeId, caller: NodeId },
    CallStarted { to: NodeId, conference: String },
    CallEnded { to: NodeId, conference: String },
}

impl Notice {
    pub fn recipient(&self) -> NodeId {
        match self {
            Notice::ConferenceList { to, .. }
            | Notice::PublicKey { to, .. }
            | Notice::ParticipantLeft { to, .. }
            | Notice::CallInvite { to, .. }
            | Notice::CallStarted { to, .. }
            | Notice::CallEnded { to, .. } => *to,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Notice::ConferenceList { .. } => "conference_list",
            Notice::PublicKey { .. } => "public_key",
            Notice::ParticipantLeft { .. } => "participant_left",
            Notice::CallInvite { .. } => "call_invite",
            Notice::CallStarted { .. } => "call_started",
            Notice::CallEnded { .. } => "call_ended",
        }
    }

    pub fn summary(&self) -> String {
        match self {
            Notice::ConferenceList { conferences, .. } => format!("conferences={}", conferences.join(",")),
            Notice::PublicKey { conference, publisher, .. } => format!("conference={conference} publisher={publisher}"),
            Notice::ParticipantLeft { conference, participant, .. } => {
                format!("conference={conference} participant={participant}")
            }
            Notice::CallInvite { caller, .. } => format!("caller={caller}"),
            Notice::CallStarted { conference, .. } | Notice::CallEnded { conference, .. } => {
                format!("conference={conference}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConferenceState {
    pub name: String,
    pub host: UserName,
    pub allowed_participants: BTreeSet<UserName>,
    pub allowed_spectators: BTreeSet<UserName>,
    participants: BTreeSet<NodeId>,
    spectators: BTreeSet<NodeId>,
    public_keys: BTreeMap<NodeId, KeyToken>,
    /// Subscriber → publishers it receives.
    subscriptions: BTreeMap<NodeId, BTreeSet<NodeId>>,
    /// Member → publishers whose key it holds.
    held_keys: BTreeMap<NodeId, BTreeSet<NodeId>>,
    ad_hoc: bool,
}

impl ConferenceState {
    pub fn new(
        name: impl Into<String>,
        host: UserName,
        allowed_participants: BTreeSet<UserName>,
        allowed_spectators: BTreeSet<UserName>,
    ) -> Result<Self, ConferenceError> {
        let name = name.into();
        check_token(&name)?;
        Ok(ConferenceState {
            name,
            host,
            allowed_participants,
            allowed_spectators,
            participants: BTreeSet::new(),
            spectators: BTreeSet::new(),
            public_keys: BTreeMap::new(),
            subscriptions: BTreeMap::new(),
            held_keys: BTreeMap::new(),
            ad_hoc: false,
        })
    }

    pub fn participants(&self) -> &BTreeSet<NodeId> {
        &self.participants
    }

    pub fn spectators(&self) -> &BTreeSet<NodeId> {
        &self.spectators
    }

    pub fn public_keys(&self) -> &BTreeMap<NodeId, KeyToken> {
        &self.public_keys
    }

    pub fn subscriptions(&self) -> &BTreeMap<NodeId, BTreeSet<NodeId>> {
        &self.subscriptions
    }

    pub fn keys_held_by(&self, member: NodeId) -> BTreeSet<NodeId> {
        self.held_keys.get(&member).cloned().unwrap_or_default()
    }

    pub fn role_of(&self, node: NodeId) -> Option<Role> {
        if self.participants.contains(&node) {
            Some(Role::Participant)
        } else if self.spectators.contains(&node) {
            Some(Role::Spectator)
        } else {
            None
        }
    }

    pub fn members(&self) -> BTreeSet<NodeId> {
        self.participants.union(&self.spectators).copied().collect()
    }

    pub fn is_ad_hoc(&self) -> bool {
        self.ad_hoc
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConferenceServer {
    credentials: BTreeMap<UserName, String>,
    sessions: BTreeMap<NodeId, UserName>,
    conferences: BTreeMap<String, ConferenceState>,
    pending_calls: BTreeMap<(NodeId, NodeId), KeyToken>,
    log_spectator_leave: bool,
    incidents: Vec<String>,
    next_call: u64,
}

impl ConferenceServer {
    pub fn new(credentials: BTreeMap<UserName, String>, log_spectator_leave: bool) -> Self {
        ConferenceServer {
            credentials,
            sessions: BTreeMap::new(),
            conferences: BTreeMap::new(),
            pending_calls: BTreeMap::new(),
            log_spectator_leave,
            incidents: Vec::new(),
            next_call: 0,
        }
    }

    pub fn create_conference(&mut self, conference: ConferenceState) -> Result<(), ConferenceError> {
        if self.conferences.contains_key(&conference.name) {
            return Err(ConferenceError::DuplicateConference(conference.name));
        }
        self.conferences.insert(conference.name.clone(), conference);
        Ok(())
    }

    pub fn conference(&self, name: &str) -> Option<&ConferenceState> {
        self.conferences.get(name)
    }

    pub fn conferences(&self) -> impl Iterator<Item = &ConferenceState> {
        self.conferences.values()
    }

    pub fn session(&self, node: NodeId) -> Option<&UserName> {
        self.sessions.get(&node)
    }

    pub fn incidents(&self) -> &[String] {
        &self.incidents
    }

    /// Applies one request from `sender`.
    pub fn handle(&mut self, sender: NodeId, message: &ControlMessage) -> Result<Vec<Notice>, ConferenceError> {
        match message {
            ControlMessage::LogIn { user, password } => self.login(sender, user, password),
            ControlMessage::JoinConferenceP { conference, key } => self.join_as_participant(sender, conference, key),
            ControlMessage::JoinConferenceS { conference } => self.join_as_spectator(sender, conference),
            ControlMessage::LeaveConference { conference } => self.leave_conference(sender, conference),
            ControlMessage::Bye => self.logout(sender),
            ControlMessage::Call { callee, key } => self.call(sender, *callee, key),
            ControlMessage::CallAccepted { caller, key } => self.accept_call(sender, *caller, key),
            ControlMessage::EndCall { conference } => self.end_call(sender, conference),
        }
    }

    pub fn login(&mut self, node: NodeId, user: &UserName, password: &str) -> Result<Vec<Notice>, ConferenceError> {
        if self.credentials.get(user).map(String::as_str) != Some(password) {
            return Err(ConferenceError::BadCredentials(user.clone()));
        }
        if self.sessions.values().any(|u| u == user) {
            return Err(ConferenceError::AlreadyLoggedIn(user.clone()));
        }
        if self.sessions.contains_key(&node) {
            return Err(ConferenceError::NodeInUse(node));
        }
        self.sessions.insert(node, user.clone());
        let conferences = self.conferences.values().filter(|c| !c.ad_hoc).map(|c| c.name.clone()).collect();
        Ok(vec![Notice::ConferenceList { to: node, conferences }])
    }

    fn authorize(&self, node: NodeId, conference: &str, role: Role) -> Result<(), ConferenceError> {
        let user = self.sessions.get(&node).ok_or(ConferenceError::NotAuthenticated(node))?;
        let conf = self
            .conferences
            .get(conference)
            .ok_or_else(|| ConferenceError::UnknownConference(conference.to_string()))?;
        if conf.role_of(node).is_some() {
            return Err(ConferenceError::AlreadyInConference(node, conference.to_string()));
        }
        let allowed = match role {
            Role::Participant => &conf.allowed_participants,
            Role::Spectator => &conf.allowed_spectators,
        };
        if !allowed.contains(user) {
            return Err(ConferenceError::NotAllowed {
                user: user.clone(),
                conference: conference.to_string(),
                role,
            });
        }
        Ok(())
    }

    pub fn join_as_participant(
        &mut self,
        node: NodeId,
        conference: &str,
        key: &KeyToken,
    ) -> Result<Vec<Notice>, ConferenceError> {
        self.authorize(node, conference, Role::Participant)?;
        let conf = self.conferences.get_mut(conference).expect("authorized");
        let mut notices = Vec::new();
        for &member in conf.participants.iter().chain(&conf.spectators) {
            notices.push(Notice::PublicKey {
                to: member,
                conference: conference.to_string(),
                publisher: node,
                key: key.clone(),
            });
            conf.held_keys.entry(member).or_default().insert(node);
            conf.subscriptions.entry(member).or_default().insert(node);
        }
        for (&publisher, existing) in &conf.public_keys {
            notices.push(Notice::PublicKey {
                to: node,
                conference: conference.to_string(),
                publisher,
                key: existing.clone(),
            });
        }
        let existing: BTreeSet<NodeId> = conf.participants.clone();
        conf.subscriptions.insert(node, existing.clone());
        let mut held = existing;
        held.insert(node);
        conf.held_keys.insert(node, held);
        conf.participants.insert(node);
        conf.public_keys.insert(node, key.clone());
        Ok(notices)
    }

    pub fn join_as_spectator(&mut self, node: NodeId, conference: &str) -> Result<Vec<Notice>, ConferenceError> {
        self.authorize(node, conference, Role::Spectator)?;
        let conf = self.conferences.get_mut(conference).expect("authorized");
        let notices = conf
            .public_keys
            .iter()
            .map(|(&publisher, key)| Notice::PublicKey {
                to: node,
                conference: conference.to_string(),
                publisher,
                key: key.clone(),
            })
            .collect();
        conf.subscriptions.insert(node, conf.participants.clone());
        conf.held_keys.insert(node, conf.participants.clone());
        conf.spectators.insert(node);
        Ok(notices)
    }

    /// Members that receive what `node` publishes in `conference`.
    pub fn publish(&self, node: NodeId, conference: &str) -> Result<BTreeSet<NodeId>, ConferenceError> {
        let conf = self
            .conferences
            .get(conference)
            .ok_or_else(|| ConferenceError::UnknownConference(conference.to_string()))?;
        match conf.role_of(node) {
            None => Err(ConferenceError::NotInConference(node, conference.to_string())),
            Some(Role::Spectator) => Err(ConferenceError::SpectatorCannotPublish(node)),
            Some(Role::Participant) => Ok(conf
                .subscriptions
                .iter()
                .filter(|(_, publishers)| publishers.contains(&node))
                .map(|(&s, _)| s)
                .collect()),
        }
    }

    pub fn leave_conference(&mut self, node: NodeId, conference: &str) -> Result<Vec<Notice>, ConferenceError> {
        let conf = self
            .conferences
            .get_mut(conference)
            .ok_or_else(|| ConferenceError::UnknownConference(conference.to_string()))?;
        let role = conf
            .role_of(node)
            .ok_or_else(|| ConferenceError::NotInConference(node, conference.to_string()))?;
        conf.subscriptions.remove(&node);
        conf.held_keys.remove(&node);
        let mut notices = Vec::new();
        match role {
            Role::Participant => {
                conf.participants.remove(&node);
                conf.public_keys.remove(&node);
                for &member in conf.participants.iter().chain(&conf.spectators) {
                    notices.push(Notice::ParticipantLeft {
                        to: member,
                        conference: conference.to_string(),
                        participant: node,
                    });
                    if let Some(s) = conf.subscriptions.get_mut(&member) {
                        s.remove(&node);
                    }
                    if let Some(k) = conf.held_keys.get_mut(&member) {
                        k.remove(&node);
                    }
                }
            }
            Role::Spectator => {
                conf.spectators.remove(&node);
                if self.log_spectator_leave {
                    self.incidents.push(format!("spectator {node} left {conference}"));
                }
            }
        }
        Ok(notices)
    }

    /// Leaves every conference, then drops the session.
    pub fn logout(&mut self, node: NodeId) -> Result<Vec<Notice>, ConferenceError> {
        if !self.sessions.contains_key(&node) {
            return Err(ConferenceError::NotAuthenticated(node));
        }
        Ok(self.drop_peer(node))
    }

    /// Cleanup for a peer that vanished without BYE. A no-op for unknown peers.
    pub fn disconnect(&mut self, node: NodeId) -> Vec<Notice> {
        self.drop_peer(node)
    }

    fn drop_peer(&mut self, node: NodeId) -> Vec<Notice> {
        let joined: Vec<String> = self
            .conferences
            .values()
            .filter(|c| c.role_of(node).is_some())
            .map(|c| c.name.clone())
            .collect();
        let mut notices = Vec::new();
        for name in joined {
            if self.conferences[&name].ad_hoc {
                notices.extend(self.end_call(node, &name).expect("member of the call"));
            } else {
                notices.extend(self.leave_conference(node, &name).expect("member of the conference"));
            }
        }
        self.pending_calls.retain(|&(caller, callee), _| caller != node && callee != node);
        self.sessions.remove(&node);
        notices
    }

    pub fn call(&mut self, caller: NodeId, callee: NodeId, key: &KeyToken) -> Result<Vec<Notice>, ConferenceError> {
        if caller == callee {
            return Err(ConferenceError::SelfCall(caller));
        }
        for n in [caller, callee] {
            if !self.sessions.contains_key(&n) {
                return Err(ConferenceError::NotAuthenticated(n));
            }
        }
        self.pending_calls.insert((caller, callee), key.clone());
        Ok(vec![Notice::CallInvite { to: callee, caller }])
    }

    /// Opens a two-member ad-hoc conference for an invited call.
    pub fn accept_call(&mut self, callee: NodeId, caller: NodeId, key: &KeyToken) -> Result<Vec<Notice>, ConferenceError> {
        let caller_key = self
            .pending_calls
            .remove(&(caller, callee))
            .ok_or(ConferenceError::NoPendingCall { caller, callee })?;
        let users: BTreeSet<UserName> = [caller, callee].iter().map(|n| self.sessions[n].clone()).collect();
        let name = format!("call-{}", self.next_call);
        self.next_call += 1;
        let mut conf = ConferenceState::new(name.clone(), self.sessions[&caller].clone(), users, BTreeSet::new())?;
        conf.ad_hoc = true;
        self.conferences.insert(name.clone(), conf);
        let mut notices = vec![
            Notice::CallStarted { to: caller, conference: name.clone() },
            Notice::CallStarted { to: callee, conference: name.clone() },
        ];
        notices.extend(self.join_as_participant(caller, &name, &caller_key)?);
        notices.extend(self.join_as_participant(callee, &name, key)?);
        Ok(notices)
    }

    pub fn end_call(&mut self, node: NodeId, conference: &str) -> Result<Vec<Notice>, ConferenceError> {
        let conf = self
            .conferences
            .get(conference)
            .filter(|c| c.ad_hoc)
            .ok_or_else(|| ConferenceError::UnknownConference(conference.to_string()))?;
        if conf.role_of(node).is_none() {
            return Err(ConferenceError::NotInConference(node, conference.to_string()));
        }
        let conf = self.conferences.remove(conference).expect("checked");
        Ok(conf
            .participants
            .iter()
            .filter(|&&p| p != node)
            .map(|&p| Notice::CallEnded { to: p, conference: conference.to_string() })
            .collect())
    }

    /// Authorization, key coverage and subscription checks over every conference.
    pub fn check_invariants(&self) -> Result<(), String> {
        for conf in self.conferences.values() {
            let name = &conf.name;
            for (&node, role) in conf
                .participants
                .iter()
                .map(|n| (n, Role::Participant))
                .chain(conf.spectators.iter().map(|n| (n, Role::Spectator)))
            {
                let allowed = match role {
                    Role::Participant => &conf.allowed_participants,
                    Role::Spectator => &conf.allowed_spectators,
                };
                match self.sessions.get(&node) {
                    Some(user) if allowed.contains(user) => {}
                    _ => return Err(format!("{node} is a {role} of {name} without authorization")),
                }
                if conf.keys_held_by(node) != conf.participants {
                    return Err(format!("{node} in {name} holds the wrong key set"));
                }
            }
            if !conf.participants.is_disjoint(&conf.spectators) {
                return Err(format!("a member of {name} holds two roles"));
            }
            if conf.public_keys.keys().copied().collect::<BTreeSet<_>>() != conf.participants {
                return Err(format!("public keys of {name} differ from its participants"));
            }
            for (subscriber, publishers) in &conf.subscriptions {
                if !publishers.is_subset(&conf.participants) {
                    return Err(format!("{subscriber} in {name} subscribes to an ex-participant"));
                }
                if conf.role_of(*subscriber).is_none() {
                    return Err(format!("{subscriber} keeps subscriptions in {name} after leaving"));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn user(name: &str) -> UserName {
        UserName::new(name).unwrap()
    }

    fn key(node: u32) -> KeyToken {
        KeyToken::new(format!("pk-{node}")).unwrap()
    }

    /// Users u0..u5, each password `pw`; `talk` allows u0..u3 to participate
    /// and u3..u5 to watch.
    fn server(log_spectators: bool) -> ConferenceServer {
        let creds = (0..6).map(|i| (user(&format!("u{i}")), "pw".to_string())).collect();
        let mut s = ConferenceServer::new(creds, log_spectators);
        let participants = (0..4).map(|i| user(&format!("u{i}"))).collect();
        let spectators = (3..6).map(|i| user(&format!("u{i}"))).collect();
        s.create_conference(ConferenceState::new("talk", user("u0"), participants, spectators).unwrap())
            .unwrap();
        for i in 0..6 {
            s.login(NodeId(i), &user(&format!("u{i}")), "pw").unwrap();
        }
        s
    }

    fn count(notices: &[Notice], kind: &str) -> usize {
        notices.iter().filter(|n| n.kind() == kind).count()
    }

    #[test]
    fn login_lists_conferences_and_rejects_bad_attempts() {
        let creds = BTreeMap::from([(user("alice"), "secret".to_string())]);
        let mut s = ConferenceServer::new(creds, false);
        s.create_conference(ConferenceState::new("talk", user("alice"), BTreeSet::new(), BTreeSet::new()).unwrap())
            .unwrap();
        let before = s.clone();
        assert_eq!(s.login(NodeId(1), &user("alice"), "wrong"), Err(ConferenceError::BadCredentials(user("alice"))));
        assert_eq!(s, before);
        let notices = s.login(NodeId(1), &user("alice"), "secret").unwrap();
        assert_eq!(notices, vec![Notice::ConferenceList { to: NodeId(1), conferences: vec!["talk".into()] }]);
        assert_eq!(s.login(NodeId(2), &user("alice"), "secret"), Err(ConferenceError::AlreadyLoggedIn(user("alice"))));
    }

    #[test]
    fn participant_join_distributes_keys() {
        let mut s = server(false);
        s.join_as_participant(NodeId(0), "talk", &key(0)).unwrap();
        s.join_as_participant(NodeId(1), "talk", &key(1)).unwrap();
        s.join_as_spectator(NodeId(4), "talk").unwrap();
        let notices = s.join_as_participant(NodeId(2), "talk", &key(2)).unwrap();
        let outbound = notices.iter().filter(|n| n.recipient() != NodeId(2)).count();
        let inbound = notices.iter().filter(|n| n.recipient() == NodeId(2)).count();
        assert_eq!((outbound, inbound), (3, 2));
        s.check_invariants().unwrap();
    }

    #[test]
    fn first_participant_and_disallowed_user() {
        let mut s = server(false);
        assert!(s.join_as_participant(NodeId(0), "talk", &key(0)).unwrap().is_empty());
        assert_eq!(s.conference("talk").unwrap().public_keys().len(), 1);
        let err = s.join_as_participant(NodeId(5), "talk", &key(5)).unwrap_err();
        assert!(matches!(err, ConferenceError::NotAllowed { .. }));
        assert!(matches!(s.join_as_spectator(NodeId(1), "talk"), Err(ConferenceError::NotAllowed { .. })));
        assert!(matches!(s.join_as_spectator(NodeId(4), "nope"), Err(ConferenceError::UnknownConference(_))));
    }

    #[test]
    fn spectator_receives_every_participant_key() {
        let mut s = server(false);
        assert!(s.join_as_spectator(NodeId(4), "talk").unwrap().is_empty());
        for i in 0..3 {
            s.join_as_participant(NodeId(i), "talk", &key(i)).unwrap();
        }
        let notices = s.join_as_spectator(NodeId(5), "talk").unwrap();
        assert_eq!(count(&notices, "public_key"), 3);
        assert_eq!(s.conference("talk").unwrap().subscriptions()[&NodeId(5)].len(), 3);
        assert_eq!(s.publish(NodeId(5), "talk"), Err(ConferenceError::SpectatorCannotPublish(NodeId(5))));
        assert_eq!(s.publish(NodeId(0), "talk").unwrap(), BTreeSet::from([NodeId(1), NodeId(2), NodeId(4), NodeId(5)]));
    }

    #[test]
    fn participant_leave_notifies_and_unsubscribes() {
        let mut s = server(false);
        for i in 0..3 {
            s.join_as_participant(NodeId(i), "talk", &key(i)).unwrap();
        }
        s.join_as_spectator(NodeId(4), "talk").unwrap();
        let notices = s.leave_conference(NodeId(1), "talk").unwrap();
        assert_eq!(count(&notices, "participant_left"), 3);
        let conf = s.conference("talk").unwrap();
        assert!(conf.subscriptions().values().all(|p| !p.contains(&NodeId(1))));
        s.check_invariants().unwrap();
    }

    #[test]
    fn spectator_leave_is_silent_but_logged_on_request() {
        let mut quiet = server(false);
        quiet.join_as_spectator(NodeId(4), "talk").unwrap();
        assert!(quiet.leave_conference(NodeId(4), "talk").unwrap().is_empty());
        assert!(quiet.incidents().is_empty());
        let mut logged = server(true);
        logged.join_as_spectator(NodeId(4), "talk").unwrap();
        assert!(logged.leave_conference(NodeId(4), "talk").unwrap().is_empty());
        assert_eq!(logged.incidents().len(), 1);
    }

    #[test]
    fn last_participant_leaves() {
        let mut s = server(false);
        s.join_as_participant(NodeId(0), "talk", &key(0)).unwrap();
        s.join_as_spectator(NodeId(4), "talk").unwrap();
        s.leave_conference(NodeId(0), "talk").unwrap();
        let conf = s.conference("talk").unwrap();
        assert!(conf.participants().is_empty());
        assert!(conf.keys_held_by(NodeId(4)).is_empty());
        s.check_invariants().unwrap();
    }

    #[test]
    fn logout_and_disconnect_clean_up() {
        let mut s = server(false);
        s.join_as_participant(NodeId(0), "talk", &key(0)).unwrap();
        s.join_as_participant(NodeId(1), "talk", &key(1)).unwrap();
        let notices = s.logout(NodeId(0)).unwrap();
        assert_eq!(count(&notices, "participant_left"), 1);
        assert!(s.session(NodeId(0)).is_none());
        assert!(s.logout(NodeId(2)).unwrap().is_empty());
        assert_eq!(s.logout(NodeId(2)), Err(ConferenceError::NotAuthenticated(NodeId(2))));
        s.disconnect(NodeId(1));
        assert!(s.conference("talk").unwrap().participants().is_empty());
        s.check_invariants().unwrap();
    }

    #[test]
    fn call_handshake_opens_two_member_conference() {
        let mut s = server(false);
        assert_eq!(count(&s.call(NodeId(0), NodeId(5), &key(0)).unwrap(), "call_invite"), 1);
        assert!(matches!(
            s.accept_call(NodeId(5), NodeId(1), &key(5)),
            Err(ConferenceError::NoPendingCall { .. })
        ));
        s.accept_call(NodeId(5), NodeId(0), &key(5)).unwrap();
        let call = s.conference("call-0").unwrap();
        assert_eq!(call.participants(), &BTreeSet::from([NodeId(0), NodeId(5)]));
        s.check_invariants().unwrap();
        let ended = s.end_call(NodeId(5), "call-0").unwrap();
        assert_eq!(ended, vec![Notice::CallEnded { to: NodeId(0), conference: "call-0".into() }]);
        assert!(s.conference("call-0").is_none());
    }

    #[derive(Debug, Clone)]
    enum Step {
        Participant(u32),
        Spectator(u32),
        Leave(u32),
        Bye(u32),
        Login(u32),
    }

    fn arb_step() -> impl Strategy<Value = Step> {
        prop_oneof![
            (0u32..6).prop_map(Step::Participant),
            (0u32..6).prop_map(Step::Spectator),
            (0u32..6).prop_map(Step::Leave),
            (0u32..6).prop_map(Step::Bye),
            (0u32..6).prop_map(Step::Login),
        ]
    }

    proptest! {
        #[test]
        fn invariants_hold_after_every_event(steps in proptest::collection::vec(arb_step(), 1..60)) {
            let mut s = server(false);
            for step in steps {
                let _ = match step {
                    Step::Participant(n) => s.join_as_participant(NodeId(n), "talk", &key(n)),
                    Step::Spectator(n) => s.join_as_spectator(NodeId(n), "talk"),
                    Step::Leave(n) => s.leave_conference(NodeId(n), "talk"),
                    Step::Bye(n) => s.logout(NodeId(n)),
                    Step::Login(n) => s.login(NodeId(n), &user(&format!("u{n}")), "pw"),
                };
                let check = s.check_invariants();
                prop_assert!(check.is_ok(), "{:?}", check);
            }
        }
    }
}
