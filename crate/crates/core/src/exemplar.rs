//! Small hand-built scenes, one per sub-task type, each with one canonical task.
//! Handy for demos, documentation and regression tests.

use crate::catalog::Catalog;
use crate::scene::{RoomType, Scene, SceneBuilder};
use crate::task::{instantiate, long_term_template, Bindings, SubTask, TaskInstruction};

fn bind(pairs: &[(&str, &str)]) -> Bindings {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

/// Scene and task for `sub_task`, using the first text form.
pub fn exemplar(sub_task: SubTask) -> (Scene, TaskInstruction) {
    let cat = Catalog::bundled();
    use SubTask::*;
    let (room, build): (RoomType, fn(&mut SceneBuilder) -> Bindings) = match sub_task {
        ExposedSearch => (RoomType::Kitchen, |b| {
            let counter = b.anchor("CounterTop");
            let fridge = b.anchor("Fridge");
            let apple = b.place("Apple", &counter);
            b.place("Egg", &fridge);
            b.visible(&counter);
            bind(&[("A", &apple)])
        }),
        EnclosedSearch => (RoomType::Kitchen, |b| {
            let fridge = b.anchor("Fridge");
            let counter = b.anchor("CounterTop");
            let apple = b.place("Apple", &fridge);
            b.place("Bread", &counter);
            b.visible(&fridge);
            bind(&[("A", &apple)])
        }),
        ExposedToggle => (RoomType::Bedroom, |b| {
            let desk = b.anchor("Desk");
            let bed = b.anchor("Bed");
            let laptop = b.place("Laptop", &desk);
            b.place("Pillow", &bed);
            b.visible(&bed);
            bind(&[("A", &laptop)])
        }),
        ExposedGrasp => (RoomType::LivingRoom, |b| {
            let table = b.anchor("SideTable");
            let sofa = b.anchor("Sofa");
            let card = b.place("CreditCard", &table);
            b.place("Pillow", &sofa);
            b.visible(&sofa);
            bind(&[("A", &card)])
        }),
        EnclosedGrasp => (RoomType::LivingRoom, |b| {
            let drawer = b.anchor("Drawer");
            let table = b.anchor("SideTable");
            let card = b.place("CreditCard", &drawer);
            b.place("Book", &table);
            b.visible(&table);
            bind(&[("A", &card)])
        }),
        Exp2ExpTransfer => (RoomType::Bedroom, |b| {
            let table = b.anchor("SideTable");
            let shelf = b.anchor("Shelf");
            let bed = b.anchor("Bed");
            let clock = b.place("AlarmClock", &table);
            b.place("Pillow", &bed);
            b.visible(&bed).visible(&shelf);
            bind(&[("A", &clock), ("B", &shelf)])
        }),
        Exp2EncTransfer => (RoomType::Kitchen, |b| {
            let counter = b.anchor("CounterTop");
            let cabinet = b.anchor("Cabinet");
            let fridge = b.anchor("Fridge");
            let bowl = b.place("Bowl", &counter);
            b.place("Egg", &fridge);
            b.visible(&cabinet).visible(&fridge);
            bind(&[("A", &bowl), ("B", &cabinet)])
        }),
        Enc2ExpTransfer => (RoomType::Bathroom, |b| {
            let cabinet = b.anchor("Cabinet");
            let tub = b.anchor("Bathtub");
            let toilet = b.anchor("Toilet");
            let candle = b.place("Candle", &cabinet);
            b.place("Towel", &tub);
            b.visible(&tub).visible(&toilet);
            bind(&[("A", &candle), ("B", &tub)])
        }),
        Enc2EncTransfer => (RoomType::Kitchen, |b| {
            let fridge = b.anchor("Fridge");
            let micro = b.anchor("Microwave");
            let counter = b.anchor("CounterTop");
            let potato = b.place("Potato", &fridge);
            b.place("Apple", &counter);
            b.visible(&micro).visible(&counter);
            bind(&[("A", &potato), ("B", &micro)])
        }),
        SequentialTransfer => (RoomType::Bedroom, |b| {
            let bed = b.anchor("Bed");
            let coffee = b.anchor("CoffeeTable");
            let desk = b.anchor("Desk");
            let bin = b.anchor("GarbageCan");
            let bear = b.place("TeddyBear", &bed);
            let pen = b.place("Pen", &desk);
            b.visible(&coffee).visible(&bin);
            bind(&[("A1", &bear), ("B1", &coffee), ("A2", &pen), ("B2", &bin)])
        }),
        LongTermComplex => (RoomType::Kitchen, |b| {
            let counter = b.anchor("CounterTop");
            let fridge = b.anchor("Fridge");
            let sink = b.anchor("SinkBasin");
            let coffee = b.anchor("CoffeeMachine");
            let bread = b.place("Bread", &counter);
            let apple = b.place("Apple", &fridge);
            let mug = b.place("Mug", &counter);
            let faucet = b.place("Faucet", &sink);
            b.visible(&counter).visible(&sink);
            bind(&[
                ("A1", &bread),
                ("B1", &fridge),
                ("A2", &apple),
                ("B2", &sink),
                ("A3", &faucet),
                ("A4", &mug),
                ("B4", &coffee),
            ])
        }),
    };
    let mut builder = SceneBuilder::new(&format!("exemplar-{}", sub_task.short_name()), room, &cat);
    let bindings = build(&mut builder);
    let scene = builder.build().expect("exemplar scene is valid");
    let (template, composition) = if sub_task == LongTermComplex {
        let parts = vec![Exp2EncTransfer, Enc2ExpTransfer, ExposedToggle, Exp2ExpTransfer];
        (long_term_template(&parts), parts)
    } else {
        (sub_task.template(), Vec::new())
    };
    let id = format!("{}/{}/0", scene.id, sub_task.short_name());
    let task = instantiate(&scene, &template, &composition, bindings, 0, id).expect("exemplar binding is valid");
    (scene, task)
}
