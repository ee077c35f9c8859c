int acceptance_placeholder_main_missing = 0;
int main(){return 0;}
