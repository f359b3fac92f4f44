use std::collections::BTreeMap;
use std::sync::Arc;

use proptest::prelude::*;

use super::*;

const GATE: &str = "\
computed modelConfidence = 1 - (predictionErrorEMA
                               + calibrationErrorEMA) / 2
computed confident       = modelConfidence >= confidenceThreshold
computed sustained       = lowConfidenceStreak >= 2
computed canRevise       = not confident
                           and (cooldownRemaining == 0)
computed revisionRequested = canRevise and sustained
                             and positivePreview
                             and (revisionKind != \"\")
computed shouldRevise    = revisionEnabled and revisionRequested

action applyRevision available when shouldRevise:
    patch policyParameters <- nextParameters
    patch cooldown         <- cooldownTurns
";

fn gate_schema(preview_as_field: bool) -> Arc<Schema> {
    let mut schema = Schema::from_fields(&[("predictionErrorEMA", Type::Real), ("calibrationErrorEMA", Type::Real), ("confidenceThreshold", Type::Real), ("lowConfidenceStreak", Type::Int), ("cooldownRemaining", Type::Int), ("revisionKind", Type::Str), ("revisionEnabled", Type::Bool), ("policyParameters", Type::RealMap), ("nextParameters", Type::RealMap), ("cooldown", Type::Int), ("cooldownTurns", Type::Int)]).unwrap();
    schema = if preview_as_field {
        schema.field("positivePreview", Type::Bool).unwrap()
    } else {
        schema
            .field("previewDelta", Type::Real)
            .and_then(|s| s.field("deltaMin", Type::Real))
            .unwrap()
    };
    Arc::new(schema)
}

fn gate_program() -> Program {
    let mut program = Program::empty(gate_schema(false));
    program.extend(Scope::Reflection, "computed positivePreview = previewDelta >= deltaMin").unwrap();
    program.extend(Scope::Reflection, GATE).unwrap();
    program
}

/// Every gate condition satisfied.
fn open_state(program: &Program) -> StateRecord {
    let mut s = StateRecord::new(Arc::clone(program.schema()));
    s.patch("predictionErrorEMA", 0.5).unwrap();
    s.patch("calibrationErrorEMA", 0.5).unwrap();
    s.patch("confidenceThreshold", 0.72).unwrap();
    s.patch("lowConfidenceStreak", 3i64).unwrap();
    s.patch("cooldownRemaining", 0i64).unwrap();
    s.patch("revisionKind", "cluster_closeout_bias").unwrap();
    s.patch("revisionEnabled", true).unwrap();
    s.patch("previewDelta", 0.02).unwrap();
    s.patch("deltaMin", 0.01).unwrap();
    s.patch("cooldownTurns", 3i64).unwrap();
    s.patch("nextParameters", Value::RealMap(BTreeMap::from([("closeoutBias".to_string(), 0.3)])))
        .unwrap();
    s
}

#[test]
fn gate_listing_parses_verbatim() {
    let program = parse_program(GATE, gate_schema(true), Scope::Reflection).unwrap();
    assert_eq!(program.computed_defs().len(), 6);
    assert_eq!(program.actions().len(), 1);
    assert_eq!(program.computed("modelConfidence").unwrap().ty, Type::Real);
    assert_eq!(program.computed("shouldRevise").unwrap().ty, Type::Bool);
}

#[test]
fn gate_listing_with_preview_definition_has_seven_computed() {
    let program = gate_program();
    assert_eq!(program.computed_defs().len(), 7);
    assert_eq!(program.actions().len(), 1);
    assert_eq!(program.actions()[0].name, "applyRevision");
}

#[test]
fn confidence_arithmetic() {
    let program = gate_program();
    let mut s = open_state(&program);
    s.patch("predictionErrorEMA", 0.3).unwrap();
    s.patch("calibrationErrorEMA", 0.3).unwrap();
    assert_eq!(program.eval(&s, "modelConfidence").unwrap(), Value::Real(0.7));
    assert_eq!(program.eval(&s, "confident").unwrap(), Value::Bool(false));

    s.patch("predictionErrorEMA", 0.2).unwrap();
    s.patch("calibrationErrorEMA", 0.4).unwrap();
    let c = program.eval(&s, "modelConfidence").unwrap().as_real().unwrap();
    assert!((c - 0.7).abs() < 1e-12);
}

#[test]
fn streak_of_one_is_not_sustained() {
    let program = gate_program();
    let mut s = open_state(&program);
    s.patch("lowConfidenceStreak", 1i64).unwrap();
    assert_eq!(program.eval(&s, "sustained").unwrap(), Value::Bool(false));
    assert_eq!(program.eval(&s, "shouldRevise").unwrap(), Value::Bool(false));
}

#[test]
fn disabled_revision_never_fires() {
    let program = gate_program();
    let mut s = open_state(&program);
    assert_eq!(program.eval(&s, "shouldRevise").unwrap(), Value::Bool(true));
    s.patch("revisionEnabled", false).unwrap();
    assert_eq!(program.eval(&s, "shouldRevise").unwrap(), Value::Bool(false));
    assert!(program.available_actions(&s).unwrap().is_empty());
}

#[test]
fn cooldown_blocks_the_action() {
    let program = gate_program();
    let mut s = open_state(&program);
    assert_eq!(program.available_actions(&s).unwrap(), vec!["applyRevision"]);
    s.patch("cooldownRemaining", 2i64).unwrap();
    assert!(program.available_actions(&s).unwrap().is_empty());
    assert_eq!(
        program.apply_action(&s, "applyRevision").unwrap_err(),
        DslError::ActionUnavailable("applyRevision".into())
    );
}

#[test]
fn apply_revision_sets_cooldown() {
    let program = gate_program();
    let s = open_state(&program);
    let (next, event) = program.apply_action(&s, "applyRevision").unwrap();
    assert_eq!(next.get("cooldown"), Some(&Value::Int(3)));
    assert_eq!(next.get("policyParameters"), s.get("nextParameters"));
    assert_eq!(event.action, "applyRevision");
    assert_eq!(event.patches.len(), 2);
    assert_eq!(event.patches[1].old, Value::Int(0));
    assert_eq!(event.patches[1].new, Value::Int(3));
    // the pre-state is untouched
    assert_eq!(s.get("cooldown"), Some(&Value::Int(0)));
}

#[test]
fn patches_read_the_pre_state() {
    let schema = Arc::new(
        Schema::from_fields(&[("a", Type::Int), ("b", Type::Int)]).unwrap(),
    );
    let program = parse_program(
        "action swap available when true:\n    patch a <- b\n    patch b <- a\n",
        schema.clone(),
        Scope::Planning,
    )
    .unwrap();
    let mut s = StateRecord::new(schema);
    s.patch("a", 1i64).unwrap();
    s.patch("b", 2i64).unwrap();
    let (next, _) = program.apply_action(&s, "swap").unwrap();
    assert_eq!(next.get("a"), Some(&Value::Int(2)));
    assert_eq!(next.get("b"), Some(&Value::Int(1)));
}

#[test]
fn failed_action_applies_nothing() {
    let schema = Arc::new(
        Schema::from_fields(&[("a", Type::Int), ("m", Type::RealMap)]).unwrap(),
    );
    let program = parse_program(
        "action bump available when true:\n    patch a <- a + 1\n    patch a <- m.missing\n",
        schema.clone(),
        Scope::Planning,
    );
    // int slot cannot take a real
    assert!(matches!(program, Err(DslError::TypeMismatch { line: 3, .. })));

    let program = parse_program(
        "action bump available when true:\n    patch a <- a + 1\n    patch m.x <- m.missing\n",
        schema.clone(),
        Scope::Planning,
    )
    .unwrap();
    let s = StateRecord::new(schema);
    let err = program.apply_action(&s, "bump").unwrap_err();
    assert!(matches!(err, DslError::MissingKey { .. }));
    assert_eq!(s.get("a"), Some(&Value::Int(0)));
}

#[test]
fn cycles_are_rejected() {
    let schema = Arc::new(Schema::new());
    let err = parse_program("computed a = b\ncomputed b = a\n", schema.clone(), Scope::Belief).unwrap_err();
    assert_eq!(err, DslError::CyclicDependency(vec!["a".into(), "b".into(), "a".into()]));
    let err = parse_program("computed a = a + 1\n", schema, Scope::Belief).unwrap_err();
    assert!(matches!(err, DslError::CyclicDependency(_)));
}

#[test]
fn unknown_references_are_rejected() {
    let schema = Arc::new(Schema::from_fields(&[("x", Type::Int)]).unwrap());
    let err = parse_program("action a available when true:\n    patch y <- 1\n", schema.clone(), Scope::Belief)
        .unwrap_err();
    assert_eq!(err, DslError::UnknownReference { name: "y".into(), line: 2 });
    let err = parse_program("computed c = x + z\n", schema, Scope::Belief).unwrap_err();
    assert_eq!(err, DslError::UnknownReference { name: "z".into(), line: 1 });
}

#[test]
fn syntax_errors_carry_lines() {
    let schema = Arc::new(Schema::from_fields(&[("x", Type::Int)]).unwrap());
    let cases = [
        ("computed a = \n", 1),
        ("computed a = x\ncomputed b = (x\n", 2),
        ("computed a = x\nshoot now\n", 2),
        ("computed a = x\n\naction go available when true\n    patch x <- 1\n", 3),
        ("action go available when true:\n", 1),
        ("computed a = 1 < 2 < 3\n", 1),
        ("    patch x <- 1\n", 1),
        ("computed a = x $ 2\n", 1),
    ];
    for (text, line) in cases {
        match parse_program(text, schema.clone(), Scope::Belief) {
            Err(DslError::Syntax { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
            other => panic!("{text:?}: {other:?}"),
        }
    }
}

#[test]
fn type_errors() {
    let schema = Arc::new(
        Schema::from_fields(&[("x", Type::Int), ("s", Type::Str), ("b", Type::Bool)]).unwrap(),
    );
    for text in ["computed a = x + s", "computed a = not x", "computed a = b < 1", "computed a = x and b"] {
        assert!(
            matches!(parse_program(text, schema.clone(), Scope::Belief), Err(DslError::TypeMismatch { .. })),
            "{text}"
        );
    }
    assert_eq!(parse_program("computed a = x / 0", schema, Scope::Belief), Err(DslError::DivisionByZero));
}

#[test]
fn runtime_errors() {
    let schema = Arc::new(Schema::from_fields(&[("x", Type::Int)]).unwrap());
    let program = parse_program("computed q = 1 / x\ncomputed big = x * x * x\n", schema.clone(), Scope::Belief).unwrap();
    let mut s = StateRecord::new(schema);
    assert_eq!(program.eval(&s, "q"), Err(DslError::DivisionByZero));
    s.patch("x", 4_000_000i64).unwrap();
    assert_eq!(program.eval(&s, "q").unwrap(), Value::Real(0.25e-6));
    s.patch("x", i64::MAX / 2).unwrap();
    assert_eq!(program.eval(&s, "big"), Err(DslError::Overflow));
}

#[test]
fn operators() {
    let schema = Arc::new(
        Schema::from_fields(&[("x", Type::Int), ("r", Type::Real), ("c", Type::Cell), ("d", Type::Cell), ("m", Type::RealMap)]).unwrap(),
    );
    let program = parse_program(
        "computed lo = min(x, 3, 7)
computed hi = max(x, r)
computed neg = -x * 2
computed same = c == d
computed entry = m.k + 1
computed mixed = x == 2.0 or false
computed prec = 1 + 2 * 3 - 4 / 2
",
        schema.clone(),
        Scope::Planning,
    )
    .unwrap();
    let mut s = StateRecord::new(schema);
    s.patch("x", 2i64).unwrap();
    s.patch("r", 2.5).unwrap();
    assert!(matches!(s.patch("m.k", 0.5), Err(DslError::MissingKey { .. })));
    s.patch("m", Value::RealMap(BTreeMap::from([("k".to_string(), 0.0)]))).unwrap();
    s.patch("m.k", 0.5).unwrap();
    assert_eq!(program.eval(&s, "lo").unwrap(), Value::Int(2));
    assert_eq!(program.eval(&s, "hi").unwrap(), Value::Real(2.5));
    assert_eq!(program.eval(&s, "neg").unwrap(), Value::Int(-4));
    assert_eq!(program.eval(&s, "same").unwrap(), Value::Bool(true));
    assert_eq!(program.eval(&s, "entry").unwrap(), Value::Real(1.5));
    assert_eq!(program.eval(&s, "mixed").unwrap(), Value::Bool(true));
    assert_eq!(program.eval(&s, "prec").unwrap(), Value::Real(5.0));
    s.patch("d", Cell::new(1, 0)).unwrap();
    assert_eq!(program.eval(&s, "same").unwrap(), Value::Bool(false));
}

#[test]
fn empty_program_has_no_actions() {
    let schema = Arc::new(Schema::new());
    let program = parse_program("", schema.clone(), Scope::Belief).unwrap();
    assert!(program.available_actions(&StateRecord::new(schema)).unwrap().is_empty());
}

#[test]
fn actions_listed_in_declaration_order() {
    let schema = Arc::new(Schema::from_fields(&[("x", Type::Int)]).unwrap());
    let program = parse_program(
        "action zeta available when x > 0:\n    patch x <- 0\naction alpha available when true:\n    patch x <- 1\naction mid available when x < 0:\n    patch x <- 2\n",
        schema.clone(),
        Scope::Planning,
    )
    .unwrap();
    let mut s = StateRecord::new(schema);
    assert_eq!(program.available_actions(&s).unwrap(), vec!["alpha"]);
    s.patch("x", 5i64).unwrap();
    assert_eq!(program.available_actions(&s).unwrap(), vec!["zeta", "alpha"]);
}

#[test]
fn later_scopes_are_invisible_to_earlier_ones() {
    let schema = Arc::new(Schema::from_fields(&[("x", Type::Int)]).unwrap());
    let mut program = parse_program("computed late = x > 1\n", schema, Scope::Reflection).unwrap();
    let err = program.extend(Scope::Belief, "computed early = late\n").unwrap_err();
    assert!(matches!(err, DslError::ScopeViolation { scope: Scope::Belief, other: Scope::Reflection, .. }));
    // the failed extension left the program as it was
    assert_eq!(program.computed_defs().len(), 1);
    program.extend(Scope::Revision, "computed later = not late\n").unwrap();
}

#[test]
fn redefinition_is_rejected() {
    let schema = Arc::new(Schema::from_fields(&[("x", Type::Int)]).unwrap());
    assert!(matches!(
        parse_program("computed x = 1\n", schema.clone(), Scope::Belief),
        Err(DslError::Duplicate { .. })
    ));
    assert!(matches!(
        parse_program("computed a = 1\ncomputed a = 2\n", schema, Scope::Belief),
        Err(DslError::Duplicate { line: 2, .. })
    ));
}

#[test]
fn host_patches_are_type_checked() {
    let schema = Arc::new(Schema::from_fields(&[("x", Type::Int)]).unwrap());
    let mut s = StateRecord::new(schema);
    assert!(s.patch("x", 1.5).is_err());
    assert!(s.patch("nope", 1i64).is_err());
    let record = s.patch("x", 7i64).unwrap();
    assert_eq!(record.old, Value::Int(0));
    assert_eq!(record.new, Value::Int(7));
}

#[test]
fn trace_values_serialize_plainly() {
    let record = PatchRecord { path: Path::parse("policyParameters.closeoutBias"), old: Value::Real(0.0), new: Value::Real(0.3) };
    let json = serde_json::to_string(&record).unwrap();
    assert_eq!(json, r#"{"path":"policyParameters.closeoutBias","old":0.0,"new":0.3}"#);
    let back: PatchRecord = serde_json::from_str(&json).unwrap();
    assert_eq!(back, record);
}

proptest! {
    #[test]
    fn evaluation_is_pure(
        pred in 0.0f64..=1.0,
        cal in 0.0f64..=1.0,
        tau in 0.0f64..=1.0,
        streak in 0i64..6,
        cooldown in 0i64..4,
        enabled: bool,
        delta in -0.1f64..0.1,
    ) {
        let program = gate_program();
        let mut s = open_state(&program);
        s.patch("predictionErrorEMA", pred).unwrap();
        s.patch("calibrationErrorEMA", cal).unwrap();
        s.patch("confidenceThreshold", tau).unwrap();
        s.patch("lowConfidenceStreak", streak).unwrap();
        s.patch("cooldownRemaining", cooldown).unwrap();
        s.patch("revisionEnabled", enabled).unwrap();
        s.patch("previewDelta", delta).unwrap();
        let before = s.clone();
        let first = program.snapshot(&s, Scope::Reflection).unwrap();
        for _ in 0..5 {
            prop_assert_eq!(&program.snapshot(&s, Scope::Reflection).unwrap(), &first);
        }
        prop_assert_eq!(&s, &before);

        // the gate formula, written out independently
        let c = 1.0 - (pred + cal) / 2.0;
        let expected = enabled && c < tau && cooldown == 0 && streak >= 2 && delta >= 0.01;
        prop_assert_eq!(first["shouldRevise"].clone(), Value::Bool(expected));
    }

    #[test]
    fn actions_change_only_patched_paths(a in -100i64..100, b in -100i64..100, flag: bool) {
        let schema = Arc::new(
            Schema::from_fields(&[("a", Type::Int), ("b", Type::Int), ("flag", Type::Bool), ("untouched", Type::Real)]).unwrap(),
        );
        let program = parse_program(
            "action go available when flag or a > b:\n    patch a <- a + b\n    patch flag <- not flag\n",
            schema.clone(),
            Scope::Planning,
        )
        .unwrap();
        let mut s = StateRecord::new(schema);
        s.patch("a", a).unwrap();
        s.patch("b", b).unwrap();
        s.patch("flag", flag).unwrap();
        s.patch("untouched", 0.5).unwrap();
        match program.apply_action(&s, "go") {
            Ok((next, event)) => {
                prop_assert!(flag || a > b);
                let patched: Vec<String> = event.patches.iter().map(|p| p.path.to_string()).collect();
                for (name, _) in s.schema().fields() {
                    if !patched.iter().any(|p| p == name) {
                        prop_assert_eq!(next.get(name), s.get(name));
                    }
                }
                prop_assert_eq!(next.get("a"), Some(&Value::Int(a + b)));
            }
            Err(e) => {
                prop_assert!(!(flag || a > b));
                prop_assert_eq!(e, DslError::ActionUnavailable("go".into()));
            }
        }
    }
}
