use faultxformer::dataset::{enumerate_records, GeneratorConfig};
use faultxformer::exec::ExecMode;
use faultxformer::model::{FaultXformer, ModelConfig, Task};
use faultxformer::pipeline::{stratified_folds, to_samples};
use faultxformer::training::{
    encode_dataset, evaluate, train, train_extractor, FeatureSet, TrainConfig,
};
use std::time::Instant;

#[test]
#[ignore]
fn probe_desk_scale() {
    let t0 = Instant::now();
    let cfg = GeneratorConfig::desk_grid(2024);
    let records = enumerate_records(&cfg, ExecMode::Sequential).unwrap();
    let samples = to_samples(&records).unwrap();
    println!("generate+samples: {:.1}s ({} rows)", t0.elapsed().as_secs_f64(), records.len());

    for task in [Task::FaultType, Task::FaultLocation] {
        let t1 = Instant::now();
        let raw = FeatureSet::from_samples(&samples, task).unwrap();
        let mut s1 = TrainConfig::for_task(task);
        s1.seed = 7;
        s1.epochs = 3;
        s1.dropout_p = 0.0;
        let (extractor, rep1) =
            train_extractor(&raw, ModelConfig::stage1(task, raw.n_classes), &s1).unwrap();
        println!(
            "[{:?}] stage1 {} epochs: {:.1}s, val f1 curve {:?}",
            task,
            rep1.loss_curve.len(),
            t1.elapsed().as_secs_f64(),
            rep1.val_f1_curve
        );
        let t2 = Instant::now();
        let encoded = encode_dataset(&extractor, &raw, ExecMode::Sequential).unwrap();
        println!("[{task:?}] encode: {:.1}s", t2.elapsed().as_secs_f64());

        let plan = stratified_folds(&encoded.labels, 10, 7).unwrap();
        let mut s2 = TrainConfig::for_task(task);
        s2.seed = 7;
        s2.epochs = 6;
        s2.dropout_p = 0.0;
        let t3 = Instant::now();
        let mut model = FaultXformer::init(ModelConfig::stage2(task), 17).unwrap();
        let rep2 = train(&mut model, &encoded, &plan.train[0], &plan.val[0], &s2).unwrap();
        let m = evaluate(&model, &encoded, &plan.test[0]).unwrap();
        println!(
            "[{task:?}] stage2 fold0 {} epochs: {:.1}s  val f1 {:?}  TEST acc {:.4} f1 {:.4}",
            rep2.loss_curve.len(),
            t3.elapsed().as_secs_f64(),
            rep2.val_f1_curve,
            m.accuracy,
            m.macro_f1
        );
    }
    println!("total: {:.1}s", t0.elapsed().as_secs_f64());
}
