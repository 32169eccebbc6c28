from decimal import Decimal

import pytest
from hypothesis import given, settings, strategies as st

from trustgate.ontology import (
    ORGANIZATION,
    USER,
    DuaRecord,
    PrincipalRef,
    bootstrap_vocabulary,
)
from trustgate.store import SYN_NS, Graph, TriplePattern, Var, iri, typed, XSD_FLOAT
from trustgate.trust import (
    BEHAVIOR,
    CREDIBILITY_SCORE,
    DUA_VIOLATION,
    IDENTITY,
    MISSING_CATEGORY,
    MISSING_PROPERTIES,
    NO_DUA_REQUEST,
    AssessmentConfig,
    DuaMismatchError,
    DuplicatePrincipalError,
    LockStateError,
    PenaltyConfig,
    PrincipalKindError,
    TrustRegistry,
    TrustError,
    as_score,
    assess,
    canonical_score,
)

CUSTODIAN = SYN_NS + "org_custodian"
ORG = SYN_NS + "org_01"
ALICE = SYN_NS + "user_001"


def make_registry(graph=None):
    registry = TrustRegistry(graph)
    registry.register(PrincipalRef(iri=CUSTODIAN, kind=ORGANIZATION, label="DataCustodian"))
    registry.register(PrincipalRef(iri=ORG, kind=ORGANIZATION, label="Organization_01"))
    registry.register(PrincipalRef(iri=ALICE, kind=USER, label="physician_105", affiliation=ORG))
    return registry


class TestCanonicalScores:
    def test_canonical_forms(self):
        assert canonical_score(as_score("1")) == "1.0"
        assert canonical_score(as_score("0.9")) == "0.9"
        assert canonical_score(as_score("0.99")) == "0.99"
        assert canonical_score(as_score("0.985")) == "0.985"
        assert canonical_score(as_score(0)) == "0.0"

    def test_out_of_range_rejected(self):
        with pytest.raises(TrustError):
            as_score("1.5")
        with pytest.raises(TrustError):
            as_score("-0.01")


class TestInit:
    def test_new_user_scores(self):
        registry = make_registry()
        record = registry.get(ALICE)
        assert record.behavior == Decimal("1.0000")
        assert record.identity == Decimal("1.0000")
        assert record.credibility is None

    def test_new_org_scores(self):
        registry = make_registry()
        record = registry.get(CUSTODIAN)
        assert record.credibility == Decimal("1.0000")
        assert record.identity == Decimal("1.0000")
        assert record.behavior is None

    def test_duplicate_registration_conflicts(self):
        registry = make_registry()
        with pytest.raises(DuplicatePrincipalError):
            registry.register(PrincipalRef(iri=ALICE, kind=USER))


class TestAssess:
    def test_fresh_scores_pass_any_threshold(self):
        registry = make_registry()
        got = registry.assess(ALICE, AssessmentConfig(threshold=Decimal("1.0")))
        assert got.passed and got.weighted_average == Decimal("1")

    def test_threshold_is_inclusive(self):
        registry = make_registry()
        registry.set_score(ALICE, BEHAVIOR, "0.9")
        cfg = AssessmentConfig(w_behavior="0.5", w_identity="0.5", threshold="0.95")
        got = registry.assess(ALICE, cfg)
        assert got.weighted_average == Decimal("0.95")
        assert got.passed is True

    def test_degenerate_weights(self):
        registry = make_registry()
        registry.set_score(ALICE, BEHAVIOR, "0")
        cfg = AssessmentConfig(w_behavior="1.0", w_identity="0.0", threshold="0.5")
        got = registry.assess(ALICE, cfg)
        assert got.weighted_average == Decimal("0")
        assert got.passed is False

    def test_weights_normalized(self):
        cfg = AssessmentConfig(w_behavior="2", w_identity="2", threshold="0.5")
        assert cfg.w_behavior + cfg.w_identity == Decimal(1)

    def test_org_record_rejected(self):
        registry = make_registry()
        with pytest.raises(PrincipalKindError):
            registry.assess(CUSTODIAN, AssessmentConfig())

    @settings(max_examples=50, deadline=None)
    @given(
        st.integers(min_value=0, max_value=100),
        st.integers(min_value=0, max_value=100),
        st.integers(min_value=0, max_value=100),
    )
    def test_passed_antitone_in_threshold(self, behavior_pct, low_pct, high_pct):
        low, high = sorted((low_pct, high_pct))
        registry = make_registry()
        registry.set_score(ALICE, BEHAVIOR, Decimal(behavior_pct) / 100)
        passed_low = registry.assess(
            ALICE, AssessmentConfig(threshold=Decimal(low) / 100)
        ).passed
        passed_high = registry.assess(
            ALICE, AssessmentConfig(threshold=Decimal(high) / 100)
        ).passed
        if passed_high:
            assert passed_low


class TestUserPenalties:
    def test_dua_violation_default(self):
        registry = make_registry()
        new = registry.penalize_user(ALICE, DUA_VIOLATION, PenaltyConfig())
        assert canonical_score(new.behavior) == "0.99"

    def test_clamped_at_zero(self):
        registry = make_registry()
        registry.set_score(ALICE, BEHAVIOR, "0.005")
        new = registry.penalize_user(ALICE, NO_DUA_REQUEST, PenaltyConfig())
        assert new.behavior == Decimal("0")

    def test_tenth_point_deduction(self):
        registry = make_registry()
        cfg = PenaltyConfig(dua_violation="0.1")
        new = registry.penalize_user(ALICE, DUA_VIOLATION, cfg)
        assert canonical_score(new.behavior) == "0.9"

    def test_hundred_violations_reach_exact_zero(self):
        registry = make_registry()
        cfg = PenaltyConfig()
        for n in range(1, 101):
            record = registry.penalize_user(ALICE, DUA_VIOLATION, cfg)
            expected = Decimal("1") - Decimal("0.01") * n
            assert record.behavior == expected
        assert record.behavior == Decimal("0")
        assert canonical_score(record.behavior) == "0.0"

    def test_tolerance_grace_forgives_first_violations(self):
        registry = make_registry()
        cfg = PenaltyConfig(tolerance_grace=2)
        first = registry.penalize_user(ALICE, DUA_VIOLATION, cfg)
        assert first.behavior == Decimal("1")
        second = registry.penalize_user(ALICE, DUA_VIOLATION, cfg)
        assert second.behavior == Decimal("1")
        third = registry.penalize_user(ALICE, DUA_VIOLATION, cfg)
        assert canonical_score(third.behavior) == "0.99"
        assert third.version > second.version > first.version

    def test_org_identity_flag_extends_penalty(self):
        registry = make_registry()
        cfg = PenaltyConfig(penalize_org_identity=True)
        registry.penalize_user(ALICE, NO_DUA_REQUEST, cfg)
        assert canonical_score(registry.get(ORG).identity) == "0.98"

    def test_penalty_touches_only_the_affected_score(self):
        registry = make_registry()
        registry.penalize_user(ALICE, DUA_VIOLATION, PenaltyConfig())
        assert registry.get(ALICE).identity == Decimal("1")
        assert registry.get(ORG).identity == Decimal("1")
        assert registry.get(CUSTODIAN).credibility == Decimal("1")
        registry.penalize_org(CUSTODIAN, MISSING_CATEGORY, PenaltyConfig())
        assert registry.get(CUSTODIAN).identity == Decimal("1")
        assert canonical_score(registry.get(ALICE).behavior) == "0.99"

    def test_wrong_kind_rejected(self):
        registry = make_registry()
        with pytest.raises(PrincipalKindError):
            registry.penalize_user(CUSTODIAN, DUA_VIOLATION, PenaltyConfig())
        with pytest.raises(TrustError):
            registry.penalize_user(ALICE, MISSING_CATEGORY, PenaltyConfig())


class TestOrgPenalties:
    def test_missing_category(self):
        registry = make_registry()
        new = registry.penalize_org(CUSTODIAN, MISSING_CATEGORY, PenaltyConfig())
        assert canonical_score(new.credibility) == "0.98"

    def test_missing_properties(self):
        registry = make_registry()
        new = registry.penalize_org(CUSTODIAN, MISSING_PROPERTIES, PenaltyConfig())
        assert canonical_score(new.credibility) == "0.99"

    def test_clamp(self):
        registry = make_registry()
        registry.set_score(CUSTODIAN, CREDIBILITY_SCORE, "0.01")
        new = registry.penalize_org(CUSTODIAN, MISSING_CATEGORY, PenaltyConfig())
        assert new.credibility == Decimal("0")


class TestLockout:
    def test_fresh_pair_not_locked(self):
        registry = make_registry()
        assert registry.check_lockout(CUSTODIAN, ORG) is False

    def test_zero_custodian_credibility_locks(self):
        registry = make_registry()
        registry.set_score(CUSTODIAN, CREDIBILITY_SCORE, "0")
        assert registry.check_lockout(CUSTODIAN, ORG) is True

    def test_zero_recipient_identity_locks(self):
        registry = make_registry()
        registry.set_score(ORG, IDENTITY, "0")
        assert registry.check_lockout(CUSTODIAN, ORG) is True

    def test_explicit_lock_mark(self):
        registry = make_registry()
        registry.lock_pair(CUSTODIAN, ORG)
        assert registry.check_lockout(CUSTODIAN, ORG) is True

    def test_user_record_rejected(self):
        registry = make_registry()
        with pytest.raises(PrincipalKindError):
            registry.check_lockout(CUSTODIAN, ALICE)


def fresh_dua(custodian=CUSTODIAN, recipient=ORG):
    return DuaRecord(
        iri=SYN_NS + "dua_01",
        custodian=custodian,
        recipient=recipient,
        requested_data=frozenset({SYN_NS + "Patient"}),
        permitted_use=frozenset({"http://example.org/dua#PublicHealth"}),
        term="1 year",
    )


class TestRewriteReset:
    def test_rewrite_clears_lockout(self):
        graph = Graph()
        bootstrap_vocabulary(graph)
        registry = make_registry(graph)
        registry.set_score(CUSTODIAN, CREDIBILITY_SCORE, "0")
        registry.lock_pair(CUSTODIAN, ORG)
        assert registry.check_lockout(CUSTODIAN, ORG) is True
        registry.rewrite_dua_reset(CUSTODIAN, ORG, fresh_dua())
        assert registry.check_lockout(CUSTODIAN, ORG) is False
        assert registry.get(CUSTODIAN).credibility == Decimal("1")

    def test_unlocked_pair_is_state_error(self):
        graph = Graph()
        registry = make_registry(graph)
        with pytest.raises(LockStateError):
            registry.rewrite_dua_reset(CUSTODIAN, ORG, fresh_dua())

    def test_mismatched_dua_rejected(self):
        graph = Graph()
        registry = make_registry(graph)
        registry.lock_pair(CUSTODIAN, ORG)
        other = SYN_NS + "org_09"
        with pytest.raises(DuaMismatchError):
            registry.rewrite_dua_reset(CUSTODIAN, ORG, fresh_dua(recipient=other))


class TestReplication:
    def test_fresh_update_applies(self):
        registry = make_registry()
        assert registry.apply_remote(ALICE, BEHAVIOR, "0.97", version=5) is True
        assert canonical_score(registry.get(ALICE).behavior) == "0.97"

    def test_duplicate_ignored(self):
        registry = make_registry()
        assert registry.apply_remote(ALICE, BEHAVIOR, "0.97", version=5) is True
        assert registry.apply_remote(ALICE, BEHAVIOR, "0.97", version=5) is False

    def test_stale_version_ignored(self):
        registry = make_registry()
        assert registry.apply_remote(ALICE, BEHAVIOR, "0.9", version=3) is True
        assert registry.apply_remote(ALICE, BEHAVIOR, "0.95", version=2) is False
        assert canonical_score(registry.get(ALICE).behavior) == "0.9"

    def test_unknown_principal_auto_registered(self):
        registry = make_registry()
        stranger = SYN_NS + "user_099"
        assert registry.apply_remote(stranger, BEHAVIOR, "0.8", version=2) is True
        assert registry.get(stranger).principal.kind == USER


class TestGraphProjection:
    def test_projection_tracks_mutations(self):
        graph = Graph()
        registry = make_registry(graph)
        registry.penalize_user(ALICE, DUA_VIOLATION, PenaltyConfig())
        got = graph.match(
            TriplePattern(iri(ALICE), iri("http://example.org/trust#behaviorTrust"), Var("v"))
        )
        assert [t.object for t in got] == [typed("0.99", XSD_FLOAT)]

    def test_users_have_no_credibility_triple(self):
        graph = Graph()
        make_registry(graph)
        got = graph.match(
            TriplePattern(iri(ALICE), iri("http://example.org/trust#credibility"), Var("v"))
        )
        assert got == []


_ops = st.lists(
    st.tuples(
        st.sampled_from(["user-penalty", "org-penalty", "assess", "remote", "reset"]),
        st.sampled_from([DUA_VIOLATION, NO_DUA_REQUEST]),
        st.sampled_from([MISSING_CATEGORY, MISSING_PROPERTIES]),
        st.integers(min_value=1, max_value=50),
    ),
    max_size=60,
)


class TestScoreSafetyProperties:
    @settings(max_examples=60, deadline=None)
    @given(_ops)
    def test_scores_bounded_versions_monotone(self, ops):
        graph = Graph()
        registry = make_registry(graph)
        cfg = PenaltyConfig()
        versions = {p: registry.get(p).version for p in registry.principals()}
        for op, user_kind, org_kind, version in ops:
            if op == "user-penalty":
                registry.penalize_user(ALICE, user_kind, cfg)
            elif op == "org-penalty":
                registry.penalize_org(CUSTODIAN, org_kind, cfg)
            elif op == "assess":
                registry.assess(ALICE, AssessmentConfig())
            elif op == "remote":
                registry.apply_remote(ALICE, BEHAVIOR, "0.5", version=version)
            elif op == "reset":
                registry.set_score(CUSTODIAN, CREDIBILITY_SCORE, "1.0")
            for principal in registry.principals():
                record = registry.get(principal)
                for value in record.scores().values():
                    assert Decimal(0) <= value <= Decimal(1)
                assert record.version >= versions[principal]
                versions[principal] = record.version
