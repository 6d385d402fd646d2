//! Fixed class-name vocabulary shared by the tokenizer and the synthetic generator.

pub const CLASS_WORDS: [&str; 256] = [
    "apple", "anchor", "arrow", "badger", "bamboo", "banana", "basket", "beacon",
    "beetle", "bell", "bison", "blossom", "boat", "bottle", "bridge", "bucket",
    "cabin", "cactus", "camel", "candle", "canoe", "canyon", "carrot", "castle",
    "cedar", "cello", "cherry", "chisel", "cloud", "clover", "cobra", "comet",
    "compass", "copper", "coral", "cotton", "crane", "crater", "cricket", "crown",
    "crystal", "daisy", "desert", "dolphin", "dragon", "drum", "eagle", "easel",
    "ember", "falcon", "feather", "fern", "ferry", "fig", "flute", "forest",
    "fossil", "fountain", "fox", "garden", "garlic", "gecko", "geyser", "ginger",
    "glacier", "goat", "goose", "granite", "grape", "harbor", "harp", "hawk",
    "hazel", "hedgehog", "helmet", "heron", "hive", "honey", "hornet", "horse",
    "iguana", "island", "ivy", "jackal", "jade", "jaguar", "jasmine", "jelly",
    "kayak", "kettle", "kite", "koala", "ladder", "lagoon", "lamp", "lantern",
    "lemon", "leopard", "lily", "lion", "lizard", "llama", "lobster", "locket",
    "lotus", "lynx", "magnet", "mango", "maple", "marble", "meadow", "melon",
    "meteor", "mint", "mirror", "mole", "moose", "moth", "mountain", "mushroom",
    "needle", "nest", "nickel", "oak", "oasis", "ocelot", "olive", "onion",
    "orchid", "osprey", "otter", "owl", "oyster", "paddle", "palm", "panda",
    "panther", "parrot", "peach", "pearl", "pebble", "pelican", "pepper", "piano",
    "pigeon", "pine", "plum", "pony", "poppy", "puffin", "pumpkin", "quail",
    "quartz", "quill", "rabbit", "raccoon", "radish", "raven", "reef", "rhino",
    "ribbon", "river", "robin", "rocket", "rose", "ruby", "saddle", "salmon",
    "sandal", "satchel", "scarab", "scroll", "seal", "shark", "shell", "shovel",
    "silver", "sled", "sloth", "snail", "sparrow", "spider", "spoon", "squid",
    "stag", "starfish", "stone", "stork", "swan", "sword", "tablet", "tiger",
    "timber", "toad", "tomato", "torch", "tortoise", "trumpet", "tulip", "tundra",
    "turnip", "turtle", "umbrella", "valley", "velvet", "violin", "viper", "volcano",
    "walnut", "walrus", "wasp", "whale", "willow", "wolf", "wombat", "yak",
    "zebra", "zinc", "acorn", "almond", "antler", "apron", "atlas", "avocado",
    "bagel", "barley", "barrel", "basil", "beaver", "birch", "bobcat", "bonsai",
    "bramble", "brick", "broom", "buffalo", "butter", "button", "cactusflower", "cider",
    "cinnamon", "clam", "cobalt", "cocoa", "cookie", "cork", "cougar", "crab",
    "cypress", "dune", "elk", "emerald", "fennel", "finch", "flamingo", "gazelle",
];
